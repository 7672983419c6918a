#include "radapter/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "radapter/numerics.hpp"

namespace radapter {

namespace {

using nlohmann::json;

std::uint64_t record_stream_key(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
    return SeededRng::mix(SeededRng::mix(seed, split), index);
}

int quantize(double z, const std::vector<double>& edges) {
    const auto it = std::upper_bound(edges.begin(), edges.end(), z);
    return static_cast<int>(it - edges.begin());
}

Tensor2D unit_row_gaussian(SeededRng& rng, std::size_t rows, std::size_t cols) {
    Tensor2D m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = rng.next_gaussian();
    }
    return l2_normalize_rows(m);
}

void atomic_write_text(const std::filesystem::path& path, const std::string& body) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
        out << body;
        if (!out) throw DataError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

json record_to_json(const PairRecord& rec) {
    json j;
    j["class"] = rec.class_id;
    j["template"] = rec.template_id;
    j["style"] = to_string(rec.style);
    j["img"] = rec.img_tokens;
    j["txt"] = rec.txt_tokens;
    return j;
}

PairRecord record_from_json(const json& j) {
    PairRecord rec;
    rec.class_id = j.at("class").get<int>();
    rec.template_id = j.at("template").get<int>();
    rec.style = style_tag_from_string(j.at("style").get<std::string>());
    rec.img_tokens = j.at("img").get<std::vector<int>>();
    rec.txt_tokens = j.at("txt").get<std::vector<int>>();
    return rec;
}

}  // namespace

void TaskSpec::validate() const {
    if (latent_dim < 2) throw std::invalid_argument("TaskSpec: latent_dim must be >= 2");
    if (n_classes_pretrain < 2) {
        throw std::invalid_argument("TaskSpec: n_classes_pretrain must be >= 2");
    }
    if (n_classes_task < 2 || n_classes_task > n_classes_pretrain) {
        throw std::invalid_argument(
            "TaskSpec: n_classes_task must be in [2, n_classes_pretrain]");
    }
    if (n_templates < 1) throw std::invalid_argument("TaskSpec: n_templates must be >= 1");
    if (img_seq_len < 1) throw std::invalid_argument("TaskSpec: img_seq_len must be >= 1");
    if (txt_seq_len < kTemplatePrefixLen + kClassDigits) {
        throw std::invalid_argument("TaskSpec: txt_seq_len too short for prefix plus class id");
    }
    if (img_vocab < 2) throw std::invalid_argument("TaskSpec: img_vocab must be >= 2");
    if (txt_vocab < class_token_base() + 2) {
        throw std::invalid_argument("TaskSpec: txt_vocab too small for template prefixes");
    }
    const double alphabet = static_cast<double>(class_digit_alphabet());
    if (alphabet * alphabet * alphabet < static_cast<double>(n_classes_pretrain)) {
        throw std::invalid_argument("TaskSpec: class id does not fit in " +
                                    std::to_string(kClassDigits) + " digits");
    }
    if (noise_std_id < 0.0 || noise_std_ood < 0.0) {
        throw std::invalid_argument("TaskSpec: noise stds must be non-negative");
    }
    if (style_mix < 0.0 || style_mix > 1.0) {
        throw std::invalid_argument("TaskSpec: style_mix must be in [0, 1]");
    }
    if (pretrain_size < 1 || id_train_size < 1 || id_test_size < 1 || ood_test_size < 1) {
        throw std::invalid_argument("TaskSpec: all split sizes must be >= 1");
    }
}

std::string to_string(StyleTag tag) {
    switch (tag) {
        case StyleTag::pre: return "pre";
        case StyleTag::id: return "id";
        case StyleTag::ood: return "ood";
    }
    throw std::logic_error("unreachable style tag");
}

StyleTag style_tag_from_string(const std::string& s) {
    if (s == "pre") return StyleTag::pre;
    if (s == "id") return StyleTag::id;
    if (s == "ood") return StyleTag::ood;
    throw DataError("unknown style tag: " + s);
}

double normal_quantile(double p) {
    if (p <= 0.0 || p >= 1.0) {
        throw std::domain_error("normal_quantile requires p in (0, 1)");
    }
    // Acklam's rational approximation, |relative error| < 1.15e-9.
    static constexpr double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
    static constexpr double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
    static constexpr double p_low = 0.02425;

    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - p_low) {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double q = p - 0.5;
    const double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

std::vector<double> standard_bin_edges(std::size_t vocab) {
    if (vocab < 2) throw std::invalid_argument("quantization needs at least 2 bins");
    std::vector<double> edges(vocab - 1);
    for (std::size_t i = 1; i < vocab; ++i) {
        edges[i - 1] = normal_quantile(static_cast<double>(i) / static_cast<double>(vocab));
    }
    return edges;
}

Tensor2D gen_prototypes(const TaskSpec& spec, SeededRng& rng) {
    spec.validate();
    Tensor2D protos(spec.n_classes_pretrain, spec.latent_dim);
    std::vector<double> row(spec.latent_dim);

    // Shared direction for the fine-grained task family.
    std::vector<double> center(spec.latent_dim);
    {
        double sq = 0.0;
        while (sq == 0.0) {
            sq = 0.0;
            for (double& x : center) {
                x = rng.next_gaussian();
                sq += x * x;
            }
        }
        const double norm = std::sqrt(sq);
        for (double& x : center) x /= norm;
    }
    // normalize(center + spread*g) has mean pairwise cosine near
    // 1 / (1 + spread^2 * latent_dim); solve that for kTaskConeCos.
    const double spread =
        std::sqrt((1.0 / kTaskConeCos - 1.0) / static_cast<double>(spec.latent_dim));

    for (std::size_t r = 0; r < spec.n_classes_pretrain; ++r) {
        const bool task_row = r < spec.n_classes_task;
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            double sq = 0.0;
            for (std::size_t j = 0; j < spec.latent_dim; ++j) {
                row[j] = (task_row ? center[j] : 0.0) + (task_row ? spread : 1.0) *
                                                            rng.next_gaussian();
                sq += row[j] * row[j];
            }
            const double norm = std::sqrt(sq);
            if (norm == 0.0) continue;
            for (double& x : row) x /= norm;

            placed = true;
            for (std::size_t p = 0; p < r && placed; ++p) {
                double cos = 0.0;
                for (std::size_t j = 0; j < spec.latent_dim; ++j) cos += row[j] * protos(p, j);
                if (cos >= 0.9) placed = false;
            }
        }
        if (!placed) {
            throw std::invalid_argument(
                "gen_prototypes: could not separate class prototypes; latent_dim too small for " +
                std::to_string(spec.n_classes_pretrain) + " classes");
        }
        for (std::size_t j = 0; j < spec.latent_dim; ++j) protos(r, j) = row[j];
    }
    return protos;
}

StylePair gen_style_pair(const TaskSpec& spec) {
    spec.validate();
    SeededRng base_rng(spec.seed, "style-base");
    SeededRng alt_rng(spec.seed, "style-alt");
    return {unit_row_gaussian(base_rng, spec.latent_dim, spec.img_seq_len),
            unit_row_gaussian(alt_rng, spec.latent_dim, spec.img_seq_len)};
}

RenderStyle make_style(const StylePair& styles, double mix, double noise_std,
                       const TaskSpec& spec) {
    if (mix < 0.0 || mix > 1.0) throw std::domain_error("style mix must be in [0, 1]");
    Tensor2D proj = styles.base * (1.0 - mix) + styles.alt * mix;
    return {l2_normalize_rows(proj), noise_std, standard_bin_edges(spec.img_vocab)};
}

std::vector<int> render_text(int class_id, int template_id, const TaskSpec& spec) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= spec.n_classes_pretrain) {
        throw std::out_of_range("render_text: class_id out of range");
    }
    if (template_id < 0 || static_cast<std::size_t>(template_id) >= spec.n_templates) {
        throw std::out_of_range("render_text: template_id out of range");
    }
    std::vector<int> toks(spec.txt_seq_len, 0);
    for (std::size_t j = 0; j < kTemplatePrefixLen; ++j) {
        toks[j] = static_cast<int>(1 + kTemplatePrefixLen * static_cast<std::size_t>(template_id) +
                                   j);
    }
    const std::size_t base = spec.class_digit_alphabet();
    std::size_t rem = static_cast<std::size_t>(class_id);
    for (std::size_t digit = 0; digit < kClassDigits; ++digit) {
        const std::size_t pos = kTemplatePrefixLen + kClassDigits - 1 - digit;
        toks[pos] = static_cast<int>(spec.class_token_base() + rem % base);
        rem /= base;
    }
    return toks;
}

PairRecord render_pair(int class_id, int template_id, StyleTag tag, const RenderStyle& style,
                       const Tensor2D& prototypes, const TaskSpec& spec, SeededRng& rng) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= prototypes.rows()) {
        throw std::out_of_range("render_pair: class_id out of range");
    }
    if (style.projection.rows() != spec.latent_dim ||
        style.projection.cols() != spec.img_seq_len ||
        style.bin_edges.size() != spec.img_vocab - 1) {
        throw ShapeError("render_pair: style does not match spec");
    }

    PairRecord rec;
    rec.class_id = class_id;
    rec.template_id = template_id;
    rec.style = tag;
    rec.txt_tokens = render_text(class_id, template_id, spec);

    // Instance latent: the class prototype nudged by a deterministic
    // per-(class, template) offset (see kInstanceCos). Keyed by the task seed
    // only, so matched records across styles share their instance.
    const double ispread =
        std::sqrt((1.0 / kInstanceCos - 1.0) / static_cast<double>(spec.latent_dim));
    SeededRng irng(
        SeededRng::mix(spec.seed, static_cast<std::uint64_t>(class_id) * spec.n_templates +
                                      static_cast<std::uint64_t>(template_id)),
        "instance");
    std::vector<double> latent(spec.latent_dim);
    double sq = 0.0;
    for (std::size_t i = 0; i < spec.latent_dim; ++i) {
        latent[i] = prototypes(static_cast<std::size_t>(class_id), i) +
                    ispread * irng.next_gaussian();
        sq += latent[i] * latent[i];
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : latent) x *= inv;

    // The sqrt(seq_len) factor restores unit signal variance after the
    // unit-row projection, keeping the standard-normal bins balanced.
    const double scale = std::sqrt(static_cast<double>(spec.img_seq_len));
    rec.img_tokens.resize(spec.img_seq_len);
    for (std::size_t j = 0; j < spec.img_seq_len; ++j) {
        double signal = 0.0;
        for (std::size_t i = 0; i < spec.latent_dim; ++i) {
            signal += latent[i] * style.projection(i, j);
        }
        const double z = scale * signal + style.noise_std * rng.next_gaussian();
        rec.img_tokens[j] = quantize(z, style.bin_edges);
    }
    return rec;
}

SplitSet gen_split(const TaskSpec& spec) {
    spec.validate();
    SeededRng proto_rng(spec.seed, "prototypes");
    const Tensor2D protos = gen_prototypes(spec, proto_rng);
    const StylePair styles = gen_style_pair(spec);
    const RenderStyle id_style = make_style(styles, 0.0, spec.noise_std_id, spec);
    const RenderStyle ood_style = make_style(styles, spec.style_mix, spec.noise_std_ood, spec);

    SplitSet out;
    out.pretrain.reserve(spec.pretrain_size);
    for (std::size_t i = 0; i < spec.pretrain_size; ++i) {
        SeededRng r(record_stream_key(spec.seed, 0, i));
        // Pretraining spans the segment between the two evaluation styles, so
        // the base model is competent on both while the shifted style stays at
        // the edge of its support rather than in the middle of it.
        const double t = r.next_double();
        const double noise = spec.noise_std_id + t * (spec.noise_std_ood - spec.noise_std_id);
        const RenderStyle st = make_style(styles, t * spec.style_mix, noise, spec);
        const int cls = static_cast<int>(i % spec.n_classes_pretrain);
        const int tpl = static_cast<int>((i / spec.n_classes_pretrain) % spec.n_templates);
        out.pretrain.push_back(render_pair(cls, tpl, StyleTag::pre, st, protos, spec, r));
    }

    auto task_split = [&](std::uint64_t split_key, std::size_t size, StyleTag tag,
                          const RenderStyle& style) {
        std::vector<PairRecord> recs;
        recs.reserve(size);
        for (std::size_t i = 0; i < size; ++i) {
            SeededRng r(record_stream_key(spec.seed, split_key, i));
            const int cls = static_cast<int>(i % spec.n_classes_task);
            const int tpl = static_cast<int>((i / spec.n_classes_task) % spec.n_templates);
            recs.push_back(render_pair(cls, tpl, tag, style, protos, spec, r));
        }
        return recs;
    };

    out.id_train = task_split(1, spec.id_train_size, StyleTag::id, id_style);
    // ood_test shares id_test's stream keys: the pairs are matched instances
    // that differ only through the rendering style.
    out.id_test = task_split(2, spec.id_test_size, StyleTag::id, id_style);
    out.ood_test = task_split(2, spec.ood_test_size, StyleTag::ood, ood_style);
    return out;
}

Batch sample_batch(const std::vector<PairRecord>& records, const TaskSpec& spec,
                   std::size_t batch_size, std::size_t min_per_class, SeededRng& rng) {
    if (min_per_class < 1) {
        throw std::invalid_argument("sample_batch: min_per_class must be >= 1");
    }
    if (batch_size < 2 * min_per_class || batch_size % min_per_class != 0) {
        throw std::invalid_argument(
            "sample_batch: batch_size must be a multiple of min_per_class and at least twice it");
    }

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < records.size(); ++i) {
        by_class[records[i].class_id].push_back(i);
    }
    if (by_class.empty()) throw DataError("sample_batch: no records");
    std::vector<int> classes;
    classes.reserve(by_class.size());
    for (const auto& [cls, pool] : by_class) {
        if (pool.size() < min_per_class) {
            throw DataError("sample_batch: class " + std::to_string(cls) + " has only " +
                            std::to_string(pool.size()) + " records, need " +
                            std::to_string(min_per_class));
        }
        classes.push_back(cls);
    }

    Batch batch;
    batch.img_tokens.reserve(batch_size);
    batch.txt_tokens.reserve(batch_size);
    batch.class_ids.reserve(batch_size);

    const std::size_t slots = batch_size / min_per_class;
    std::vector<std::size_t> pool;
    for (std::size_t s = 0; s < slots; ++s) {
        const int cls = classes[static_cast<std::size_t>(
            rng.next_below(static_cast<std::uint64_t>(classes.size())))];
        pool = by_class[cls];
        // Partial Fisher-Yates: the first min_per_class entries become a
        // uniform draw without replacement.
        for (std::size_t t = 0; t < min_per_class; ++t) {
            const std::size_t j =
                t + static_cast<std::size_t>(
                        rng.next_below(static_cast<std::uint64_t>(pool.size() - t)));
            std::swap(pool[t], pool[j]);
            const PairRecord& rec = records[pool[t]];
            const int tpl =
                static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.n_templates)));
            batch.img_tokens.push_back(rec.img_tokens);
            batch.txt_tokens.push_back(render_text(rec.class_id, tpl, spec));
            batch.class_ids.push_back(rec.class_id);
        }
    }
    batch.labels = build_label_matrix(batch.class_ids);
    return batch;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<PairRecord>& records) {
    std::string body;
    for (const PairRecord& rec : records) {
        body += record_to_json(rec).dump();
        body += '\n';
    }
    atomic_write_text(path, body);
}

std::vector<PairRecord> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<PairRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

void write_task_spec(const std::filesystem::path& path, const TaskSpec& spec) {
    json j;
    j["latent_dim"] = spec.latent_dim;
    j["n_classes_pretrain"] = spec.n_classes_pretrain;
    j["n_classes_task"] = spec.n_classes_task;
    j["n_templates"] = spec.n_templates;
    j["img_seq_len"] = spec.img_seq_len;
    j["txt_seq_len"] = spec.txt_seq_len;
    j["img_vocab"] = spec.img_vocab;
    j["txt_vocab"] = spec.txt_vocab;
    j["noise_std_id"] = spec.noise_std_id;
    j["noise_std_ood"] = spec.noise_std_ood;
    j["style_mix"] = spec.style_mix;
    j["seed"] = spec.seed;
    j["pretrain_size"] = spec.pretrain_size;
    j["id_train_size"] = spec.id_train_size;
    j["id_test_size"] = spec.id_test_size;
    j["ood_test_size"] = spec.ood_test_size;
    atomic_write_text(path, j.dump(2) + "\n");
}

TaskSpec read_task_spec(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    TaskSpec spec;
    try {
        const json j = json::parse(in);
        spec.latent_dim = j.at("latent_dim").get<std::size_t>();
        spec.n_classes_pretrain = j.at("n_classes_pretrain").get<std::size_t>();
        spec.n_classes_task = j.at("n_classes_task").get<std::size_t>();
        spec.n_templates = j.at("n_templates").get<std::size_t>();
        spec.img_seq_len = j.at("img_seq_len").get<std::size_t>();
        spec.txt_seq_len = j.at("txt_seq_len").get<std::size_t>();
        spec.img_vocab = j.at("img_vocab").get<std::size_t>();
        spec.txt_vocab = j.at("txt_vocab").get<std::size_t>();
        spec.noise_std_id = j.at("noise_std_id").get<double>();
        spec.noise_std_ood = j.at("noise_std_ood").get<double>();
        spec.style_mix = j.at("style_mix").get<double>();
        spec.seed = j.at("seed").get<std::uint64_t>();
        spec.pretrain_size = j.at("pretrain_size").get<std::size_t>();
        spec.id_train_size = j.at("id_train_size").get<std::size_t>();
        spec.id_test_size = j.at("id_test_size").get<std::size_t>();
        spec.ood_test_size = j.at("ood_test_size").get<std::size_t>();
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    spec.validate();
    return spec;
}

SplitSet write_split_files(const std::filesystem::path& dir, const TaskSpec& spec) {
    std::filesystem::create_directories(dir);
    SplitSet splits = gen_split(spec);
    write_jsonl(dir / "pretrain.jsonl", splits.pretrain);
    write_jsonl(dir / "id_train.jsonl", splits.id_train);
    write_jsonl(dir / "id_test.jsonl", splits.id_test);
    write_jsonl(dir / "ood_test.jsonl", splits.ood_test);
    write_task_spec(dir / "task_spec.json", spec);
    return splits;
}

}  // namespace radapter
