#include "radapter/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace radapter {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace {

using nlohmann::json;

void append_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

void append_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    out.append(buf, 8);
}

json config_to_json(const EncoderConfig& cfg) {
    json j;
    j["d"] = cfg.d;
    j["heads"] = cfg.heads;
    j["layers"] = cfg.layers;
    j["seq_len"] = cfg.seq_len;
    j["vocab_size"] = cfg.vocab_size;
    j["embed_dim"] = cfg.embed_dim;
    j["w_o_has_bias"] = cfg.w_o_has_bias;
    return j;
}

EncoderConfig config_from_json(const json& j) {
    EncoderConfig cfg;
    cfg.d = j.at("d").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.layers = j.at("layers").get<std::size_t>();
    cfg.seq_len = j.at("seq_len").get<std::size_t>();
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.w_o_has_bias = j.at("w_o_has_bias").get<bool>();
    return cfg;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

const Tensor2D* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return &t;
    }
    return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    json header;
    header["format"] = "radapter checkpoint";
    header["version"] = ckpt.version;
    header["img_cfg"] = config_to_json(ckpt.img_cfg);
    header["txt_cfg"] = config_to_json(ckpt.txt_cfg);
    header["adapter"] = {{"sites_per_tower", ckpt.adapter.sites_per_tower},
                         {"rank", ckpt.adapter.rank},
                         {"drop_p", ckpt.adapter.drop_p},
                         {"momentum", ckpt.adapter.momentum}};
    json prov;
    prov["seed"] = ckpt.prov.seed;
    prov["config_hash"] = ckpt.prov.config_hash;
    prov["source_hash"] =
        ckpt.prov.source_hash.has_value() ? json(*ckpt.prov.source_hash) : json(nullptr);
    prov["alpha"] = ckpt.prov.alpha.has_value() ? json(*ckpt.prov.alpha) : json(nullptr);
    header["provenance"] = prov;

    json table = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        table.push_back({{"name", name},
                         {"rows", t.rows()},
                         {"cols", t.cols()},
                         {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
    }
    header["tensors"] = table;

    const std::string header_text = header.dump(2) + "\n";

    std::string out;
    out.reserve(20 + header_text.size() + offset);
    out.append(kCheckpointMagic, 8);
    append_u32(out, ckpt.version);
    append_u64(out, static_cast<std::uint64_t>(header_text.size()));
    out += header_text;
    for (const auto& [name, t] : ckpt.tensors) {
        const std::size_t nbytes = t.size() * sizeof(double);
        const std::size_t old = out.size();
        out.resize(old + nbytes);
        std::memcpy(out.data() + old, t.data(), nbytes);
    }
    return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& origin) {
    if (bytes.size() < 20) throw TruncatedPayloadError(origin + ": file shorter than preamble");
    if (bytes.substr(0, 8) != std::string_view(kCheckpointMagic, 8)) {
        throw BadMagicError(origin + ": bad magic");
    }
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 8, 4);
    if (version != kCheckpointVersion) {
        throw VersionMismatchError(origin + ": version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointVersion));
    }
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 12, 8);
    if (20 + header_len > bytes.size()) {
        throw TruncatedPayloadError(origin + ": header extends past end of file");
    }
    const std::string_view payload = bytes.substr(20 + header_len);

    Checkpoint ckpt;
    ckpt.version = version;
    json header;
    try {
        header = json::parse(bytes.substr(20, header_len));
        ckpt.img_cfg = config_from_json(header.at("img_cfg"));
        ckpt.txt_cfg = config_from_json(header.at("txt_cfg"));
        const json& am = header.at("adapter");
        ckpt.adapter.sites_per_tower = am.at("sites_per_tower").get<std::size_t>();
        ckpt.adapter.rank = am.at("rank").get<std::size_t>();
        ckpt.adapter.drop_p = am.at("drop_p").get<double>();
        ckpt.adapter.momentum = am.at("momentum").get<double>();
        const json& prov = header.at("provenance");
        ckpt.prov.seed = prov.at("seed").get<std::uint64_t>();
        ckpt.prov.config_hash = prov.at("config_hash").get<std::uint64_t>();
        if (!prov.at("source_hash").is_null()) {
            ckpt.prov.source_hash = prov.at("source_hash").get<std::uint64_t>();
        }
        if (!prov.at("alpha").is_null()) {
            ckpt.prov.alpha = prov.at("alpha").get<double>();
        }

        struct Region {
            std::uint64_t begin, end;
        };
        std::vector<Region> regions;
        for (const json& entry : header.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::size_t rows = entry.at("rows").get<std::size_t>();
            const std::size_t cols = entry.at("cols").get<std::size_t>();
            const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
            const std::uint64_t nbytes =
                static_cast<std::uint64_t>(rows) * cols * sizeof(double);
            if (off + nbytes > payload.size()) {
                throw TruncatedPayloadError(origin + ": tensor " + name +
                                            " extends past end of payload");
            }
            for (const Region& r : regions) {
                if (off < r.end && r.begin < off + nbytes) {
                    throw OffsetOverlapError(origin + ": tensor " + name +
                                             " overlaps an earlier tensor");
                }
            }
            regions.push_back({off, off + nbytes});
            if (ckpt.find(name) != nullptr) {
                throw OffsetOverlapError(origin + ": duplicate tensor name " + name);
            }
            Tensor2D t(rows, cols);
            std::memcpy(t.data(), payload.data() + off, nbytes);
            ckpt.tensors.emplace_back(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw CheckpointError(origin + ": malformed header: " + e.what());
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

namespace {

void append_tower(Checkpoint& ckpt, const std::string& prefix, const EncoderConfig& cfg,
                  const TowerState& tower) {
    tower.weights.validate(cfg);
    for (const auto& [name, t] : tower.weights.named_tensors()) {
        ckpt.tensors.emplace_back(prefix + name, *t);
    }
    for (const auto& [name, t] : tower.adapters.named_tensors()) {
        ckpt.tensors.emplace_back(prefix + name, *t);
    }
    for (std::size_t i = 0; i < tower.shadows.size(); ++i) {
        ckpt.tensors.emplace_back(prefix + "adapter" + std::to_string(i) + ".ema_shadow",
                                  tower.shadows[i]);
    }
}

}  // namespace

Checkpoint make_checkpoint(const EncoderConfig& img_cfg, const TowerState& img,
                           const EncoderConfig& txt_cfg, const TowerState& txt,
                           const AdapterMeta& adapter, const Provenance& prov) {
    if (img.adapters.sites.size() != adapter.sites_per_tower ||
        txt.adapters.sites.size() != adapter.sites_per_tower ||
        img.shadows.size() != adapter.sites_per_tower ||
        txt.shadows.size() != adapter.sites_per_tower) {
        throw CheckpointError("make_checkpoint: adapter metadata does not match tower state");
    }
    Checkpoint ckpt;
    ckpt.img_cfg = img_cfg;
    ckpt.txt_cfg = txt_cfg;
    ckpt.adapter = adapter;
    ckpt.prov = prov;
    append_tower(ckpt, "img.", img_cfg, img);
    append_tower(ckpt, "txt.", txt_cfg, txt);
    return ckpt;
}

TowerState extract_tower(const Checkpoint& ckpt, const std::string& prefix,
                         const EncoderConfig& cfg) {
    TowerState tower;
    tower.weights = EncoderWeights::zeros(cfg);
    for (auto& [name, t] : tower.weights.named_tensors()) {
        const Tensor2D* src = ckpt.find(prefix + name);
        if (src == nullptr) throw MissingTensorError("checkpoint lacks tensor " + prefix + name);
        if (!src->same_shape(*t)) {
            throw CheckpointError("tensor " + prefix + name + " has shape " + src->shape_str() +
                                  ", expected " + t->shape_str());
        }
        *t = *src;
    }

    for (std::size_t i = 0; i < ckpt.adapter.sites_per_tower; ++i) {
        const std::string base = prefix + "adapter" + std::to_string(i);
        AdapterWeights aw =
            ckpt.adapter.rank == 0
                ? AdapterWeights::full_rank_zero(cfg.d, ckpt.adapter.drop_p)
                : AdapterWeights{LowRank{Tensor2D(cfg.d, ckpt.adapter.rank),
                                         Tensor2D(ckpt.adapter.rank, cfg.d)},
                                 ckpt.adapter.drop_p};
        for (auto& [suffix, dst] :
             std::vector<std::pair<std::string, Tensor2D*>>{aw.is_low_rank()
                 ? std::vector<std::pair<std::string, Tensor2D*>>{
                       {".b", &std::get<LowRank>(aw.structure).b},
                       {".a", &std::get<LowRank>(aw.structure).a}}
                 : std::vector<std::pair<std::string, Tensor2D*>>{
                       {".w", &std::get<FullRank>(aw.structure).w}}}) {
            const Tensor2D* src = ckpt.find(base + suffix);
            if (src == nullptr) {
                throw MissingTensorError("checkpoint lacks tensor " + base + suffix);
            }
            if (!src->same_shape(*dst)) {
                throw CheckpointError("tensor " + base + suffix + " has shape " +
                                      src->shape_str() + ", expected " + dst->shape_str());
            }
            *dst = *src;
        }
        tower.adapters.sites.push_back(std::move(aw));

        const Tensor2D* shadow = ckpt.find(base + ".ema_shadow");
        if (shadow == nullptr) {
            throw MissingTensorError("checkpoint lacks tensor " + base + ".ema_shadow");
        }
        if (shadow->rows() != cfg.d || shadow->cols() != cfg.d) {
            throw CheckpointError("tensor " + base + ".ema_shadow has shape " +
                                  shadow->shape_str());
        }
        tower.shadows.push_back(*shadow);
    }
    return tower;
}

Checkpoint merge_checkpoint(const Checkpoint& ckpt, double alpha, bool use_raw) {
    if (!ckpt.has_adapters()) {
        throw MissingTensorError("merge: checkpoint has no adapter tensors");
    }

    Checkpoint out;
    out.img_cfg = ckpt.img_cfg;
    out.txt_cfg = ckpt.txt_cfg;
    out.adapter = AdapterMeta{};  // merged output is a plain backbone
    out.prov.seed = ckpt.prov.seed;
    out.prov.config_hash = ckpt.prov.config_hash;
    out.prov.source_hash = fnv1a64(serialize_checkpoint(ckpt));
    out.prov.alpha = alpha;

    for (const auto& [prefix, cfg] :
         std::vector<std::pair<std::string, const EncoderConfig*>>{{"img.", &ckpt.img_cfg},
                                                                   {"txt.", &ckpt.txt_cfg}}) {
        TowerState tower = extract_tower(ckpt, prefix, *cfg);
        std::vector<Tensor2D> mats;
        mats.reserve(tower.adapters.sites.size());
        for (std::size_t i = 0; i < tower.adapters.sites.size(); ++i) {
            mats.push_back(use_raw ? effective_matrix(tower.adapters.sites[i])
                                   : tower.shadows[i]);
        }
        const EncoderWeights merged = fold_adapters(tower.weights, *cfg, mats, alpha);
        for (const auto& [name, t] : merged.named_tensors()) {
            out.tensors.emplace_back(prefix + name, *t);
        }
    }
    return out;
}

}  // namespace radapter
