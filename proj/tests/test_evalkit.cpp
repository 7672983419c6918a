#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "radapter/evalkit.hpp"
#include "radapter/numerics.hpp"
#include "radapter/trainer.hpp"

using namespace radapter;

namespace {

TaskSpec tiny_spec(std::uint64_t seed) {
    TaskSpec spec;
    spec.latent_dim = 8;
    spec.n_classes_pretrain = 16;
    spec.n_classes_task = 8;
    spec.n_templates = 2;
    spec.img_seq_len = 8;
    spec.txt_seq_len = 8;
    spec.img_vocab = 32;
    spec.txt_vocab = 32;
    spec.noise_std_id = 0.25;
    spec.noise_std_ood = 0.5;
    spec.style_mix = 0.5;
    spec.seed = seed;
    spec.pretrain_size = 256;
    spec.id_train_size = 128;
    spec.id_test_size = 64;
    spec.ood_test_size = 64;
    spec.validate();
    return spec;
}

ModelConfig tiny_model() {
    ModelConfig mcfg;
    mcfg.d = 8;
    mcfg.heads = 2;
    mcfg.layers = 1;
    mcfg.embed_dim = 8;
    return mcfg;
}

Checkpoint init_checkpoint(const TaskSpec& spec, const std::vector<PairRecord>& records,
                           std::uint64_t seed) {
    TrainConfig cfg = TrainConfig::pretrain_defaults();
    cfg.epochs = 0;
    cfg.batch = 8;
    cfg.seed = seed;
    return pretrain(records, spec, tiny_model(), cfg, nullptr);
}

double row_norm(const Tensor2D& t, std::size_t r) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j) s += t(r, j) * t(r, j);
    return std::sqrt(s);
}

// Reference recall@k with the same tie rule: higher score first, lower
// original index on equal scores.
double oracle_recall(const Tensor2D& queries, const Tensor2D& gallery,
                     const std::vector<std::vector<std::size_t>>& positives, std::size_t k) {
    std::size_t hits = 0;
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        std::vector<std::size_t> order(gallery.rows());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            double sa = 0.0, sb = 0.0;
            for (std::size_t j = 0; j < gallery.cols(); ++j) {
                sa += queries(q, j) * gallery(a, j);
                sb += queries(q, j) * gallery(b, j);
            }
            if (sa != sb) return sa > sb;
            return a < b;
        });
        bool hit = false;
        for (std::size_t i = 0; i < k; ++i) {
            hit = hit || std::find(positives[q].begin(), positives[q].end(), order[i]) !=
                             positives[q].end();
        }
        if (hit) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(queries.rows());
}

}  // namespace

TEST_SUITE("evalkit") {

TEST_CASE("single-template prototypes equal the template embedding") {
    TaskSpec spec = tiny_spec(41);
    spec.n_templates = 1;
    spec.validate();
    const SplitSet split = gen_split(spec);
    const Checkpoint ckpt = init_checkpoint(spec, split.pretrain, 2);
    const ModelState model = model_from_checkpoint(ckpt);

    const Tensor2D protos =
        class_prototypes(model.txt_cfg, model.txt, nullptr, spec, spec.n_classes_task);
    REQUIRE(protos.rows() == spec.n_classes_task);
    for (std::size_t c = 0; c < protos.rows(); ++c) {
        const EncodeResult res = encode(render_text(static_cast<int>(c), 0, spec),
                                        model.txt_cfg, model.txt, nullptr, RunMode::eval,
                                        nullptr);
        for (std::size_t j = 0; j < protos.cols(); ++j) {
            CHECK(protos(c, j) == doctest::Approx(res.embedding(0, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("prototypes are the re-normalized template mean, with unit rows") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint ckpt = init_checkpoint(spec, split.pretrain, 2);
    const ModelState model = model_from_checkpoint(ckpt);

    const Tensor2D protos =
        class_prototypes(model.txt_cfg, model.txt, nullptr, spec, spec.n_classes_task);
    Tensor2D mean(spec.n_classes_task, model.txt_cfg.embed_dim);
    for (std::size_t c = 0; c < spec.n_classes_task; ++c) {
        for (std::size_t t = 0; t < spec.n_templates; ++t) {
            const EncodeResult res =
                encode(render_text(static_cast<int>(c), static_cast<int>(t), spec),
                       model.txt_cfg, model.txt, nullptr, RunMode::eval, nullptr);
            for (std::size_t j = 0; j < mean.cols(); ++j) {
                mean(c, j) += res.embedding(0, j) / static_cast<double>(spec.n_templates);
            }
        }
    }
    const Tensor2D expected = l2_normalize_rows(mean);
    for (std::size_t c = 0; c < protos.rows(); ++c) {
        CHECK(row_norm(protos, c) == doctest::Approx(1.0).epsilon(1e-12));
        for (std::size_t j = 0; j < protos.cols(); ++j) {
            CHECK(protos(c, j) == doctest::Approx(expected(c, j)).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(class_prototypes(model.txt_cfg, model.txt, nullptr, spec, 0),
                    std::invalid_argument);
}

TEST_CASE("classification is perfect against each record's own embedding") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint ckpt = init_checkpoint(spec, split.pretrain, 2);
    const ModelState model = model_from_checkpoint(ckpt);

    std::vector<PairRecord> records(split.id_test.begin(), split.id_test.begin() + 4);
    Tensor2D protos(4, model.img_cfg.embed_dim);
    for (std::size_t i = 0; i < 4; ++i) {
        records[i].class_id = static_cast<int>(i);
        const EncodeResult res = encode(records[i].img_tokens, model.img_cfg, model.img,
                                        nullptr, RunMode::eval, nullptr);
        for (std::size_t j = 0; j < protos.cols(); ++j) protos(i, j) = res.embedding(0, j);
    }
    CHECK(classify_accuracy(model.img_cfg, model.img, nullptr, records, protos) == 1.0);
}

TEST_CASE("classification ties resolve to the lowest class index") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint ckpt = init_checkpoint(spec, split.pretrain, 2);
    const ModelState model = model_from_checkpoint(ckpt);

    PairRecord rec = split.id_test[0];
    const EncodeResult res =
        encode(rec.img_tokens, model.img_cfg, model.img, nullptr, RunMode::eval, nullptr);
    Tensor2D protos(2, model.img_cfg.embed_dim);
    for (std::size_t j = 0; j < protos.cols(); ++j) {
        protos(0, j) = res.embedding(0, j);
        protos(1, j) = res.embedding(0, j);  // exact duplicate: a guaranteed tie
    }
    rec.class_id = 1;
    CHECK(classify_accuracy(model.img_cfg, model.img, nullptr, {rec}, protos) == 0.0);
    rec.class_id = 0;
    CHECK(classify_accuracy(model.img_cfg, model.img, nullptr, {rec}, protos) == 1.0);

    CHECK_THROWS_AS(classify_accuracy(model.img_cfg, model.img, nullptr, {}, protos),
                    std::invalid_argument);
}

TEST_CASE("an untrained model classifies near chance") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint ckpt = init_checkpoint(spec, split.pretrain, 2);
    const SplitMetrics m = evaluate_checkpoint(ckpt, split.id_test, spec);
    CHECK(m.accuracy <= 0.5);  // chance is 1/8
    CHECK(m.accuracy >= 0.0);
    CHECK(m.recall1 <= 1.0);
}

TEST_CASE("recall@k saturates when k covers the gallery") {
    SeededRng rng(5, "init");
    const Tensor2D queries = l2_normalize_rows(gaussian_sample(rng, 6, 4, 0.0, 1.0));
    const Tensor2D gallery = l2_normalize_rows(gaussian_sample(rng, 5, 4, 0.0, 1.0));
    std::vector<std::vector<std::size_t>> positives(6, std::vector<std::size_t>{3});
    CHECK(recall_at_k(queries, gallery, positives, 5) == 1.0);
}

TEST_CASE("recall@1 finds each query's own permuted copy") {
    SeededRng rng(6, "init");
    const Tensor2D queries = l2_normalize_rows(gaussian_sample(rng, 8, 4, 0.0, 1.0));
    const std::vector<std::size_t> perm = {3, 1, 7, 0, 5, 2, 6, 4};
    Tensor2D gallery(8, 4);
    for (std::size_t q = 0; q < 8; ++q) {
        for (std::size_t j = 0; j < 4; ++j) gallery(perm[q], j) = queries(q, j);
    }
    std::vector<std::vector<std::size_t>> positives(8);
    for (std::size_t q = 0; q < 8; ++q) positives[q] = {perm[q]};
    CHECK(recall_at_k(queries, gallery, positives, 1) == 1.0);
}

TEST_CASE("recall@k agrees with a brute-force reference") {
    SeededRng rng(7, "init");
    const Tensor2D queries = l2_normalize_rows(gaussian_sample(rng, 20, 4, 0.0, 1.0));
    const Tensor2D gallery = l2_normalize_rows(gaussian_sample(rng, 8, 4, 0.0, 1.0));
    std::vector<std::vector<std::size_t>> positives(20);
    for (std::size_t q = 0; q < 20; ++q) {
        const std::size_t n = 1 + rng.next_below(3);
        for (std::size_t i = 0; i < n; ++i) positives[q].push_back(rng.next_below(8));
    }
    for (const std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
        CHECK(recall_at_k(queries, gallery, positives, k) ==
              oracle_recall(queries, gallery, positives, k));
    }
}

TEST_CASE("recall@k validates its arguments") {
    SeededRng rng(8, "init");
    const Tensor2D queries = l2_normalize_rows(gaussian_sample(rng, 3, 4, 0.0, 1.0));
    const Tensor2D gallery = l2_normalize_rows(gaussian_sample(rng, 2, 4, 0.0, 1.0));
    std::vector<std::vector<std::size_t>> positives(3, std::vector<std::size_t>{0});
    CHECK_THROWS_AS(recall_at_k(queries, gallery, positives, 3), std::invalid_argument);
    CHECK_THROWS_AS(recall_at_k(queries, gallery, positives, 0), std::invalid_argument);
    positives.pop_back();
    CHECK_THROWS_AS(recall_at_k(queries, gallery, positives, 1), std::invalid_argument);
    const Tensor2D narrow(2, 3);
    CHECK_THROWS_AS(recall_at_k(queries, narrow, positives, 1), ShapeError);
}

TEST_CASE("checkpoint evaluation is deterministic") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint ckpt = init_checkpoint(spec, split.pretrain, 2);
    const SplitMetrics a = evaluate_checkpoint(ckpt, split.id_test, spec);
    const SplitMetrics b = evaluate_checkpoint(ckpt, split.id_test, spec);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.recall1 == b.recall1);
    CHECK_THROWS_AS(evaluate_checkpoint(ckpt, {}, spec), std::invalid_argument);
}

TEST_CASE("alpha sweep enumerates rows in alpha, split, metric order") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint base = init_checkpoint(spec, split.pretrain, 2);
    TrainConfig cfg = TrainConfig::finetune_defaults();
    cfg.epochs = 1;
    cfg.batch = 16;
    cfg.seed = 6;
    const Checkpoint tuned = finetune(base, split.id_train, spec, cfg, nullptr);

    const std::vector<double> alphas = {0.0, 0.5, 1.0};
    const std::vector<SplitRecords> splits = {{"id_test", &split.id_test},
                                              {"ood_test", &split.ood_test}};
    const EvalReport report = alpha_sweep(base, tuned, alphas, splits, spec);
    REQUIRE(report.rows.size() == alphas.size() * splits.size() * 2);

    std::size_t r = 0;
    for (const double alpha : alphas) {
        for (const SplitRecords& s : splits) {
            for (const std::string metric : {"accuracy", "recall@1"}) {
                CHECK(report.rows[r].alpha == alpha);
                CHECK(report.rows[r].split == s.name);
                CHECK(report.rows[r].metric == metric);
                CHECK(report.rows[r].seed == tuned.prov.seed);
                CHECK(report.rows[r].config_hash == tuned.prov.config_hash);
                ++r;
            }
        }
    }

    // Strength zero is the base model; strength one is the merged model.
    const SplitMetrics base_id = evaluate_checkpoint(base, split.id_test, spec);
    CHECK(report.rows[0].value == base_id.accuracy);
    CHECK(report.rows[1].value == base_id.recall1);
    const Checkpoint merged1 = merge_checkpoint(tuned, 1.0, false);
    const SplitMetrics merged_ood = evaluate_checkpoint(merged1, split.ood_test, spec);
    CHECK(report.rows[10].value == merged_ood.accuracy);
    CHECK(report.rows[11].value == merged_ood.recall1);
}

TEST_CASE("alpha sweep rejects mismatched or adapterless inputs") {
    const TaskSpec spec = tiny_spec(41);
    const SplitSet split = gen_split(spec);
    const Checkpoint base = init_checkpoint(spec, split.pretrain, 2);
    TrainConfig cfg = TrainConfig::finetune_defaults();
    cfg.epochs = 0;
    cfg.batch = 8;
    const Checkpoint tuned = finetune(base, split.id_train, spec, cfg, nullptr);
    const std::vector<SplitRecords> splits = {{"id_test", &split.id_test}};

    CHECK_THROWS_AS(alpha_sweep(base, base, {0.0}, splits, spec), MissingTensorError);

    TrainConfig pcfg = TrainConfig::pretrain_defaults();
    pcfg.epochs = 0;
    pcfg.batch = 8;
    pcfg.seed = 2;
    ModelConfig narrow = tiny_model();
    narrow.embed_dim = 4;
    const Checkpoint other = pretrain(split.pretrain, spec, narrow, pcfg, nullptr);
    CHECK_THROWS_AS(alpha_sweep(other, tuned, {0.0}, splits, spec), std::invalid_argument);

    const std::vector<SplitRecords> null_split = {{"id_test", nullptr}};
    CHECK_THROWS_AS(alpha_sweep(base, tuned, {0.0}, null_split, spec),
                    std::invalid_argument);
}

TEST_CASE("reports render as six-digit csv") {
    EvalReport report;
    report.rows.push_back(EvalRow{0.5, "id_test", "accuracy", 0.8125, 7, 99});
    report.rows.push_back(EvalRow{1.0, "ood_test", "recall@1", 0.25, 7, 99});
    const std::string csv = report_to_csv(report);
    CHECK(csv ==
          "alpha,split,metric,value,seed,config_hash\n"
          "0.500000,id_test,accuracy,0.812500,7,99\n"
          "1.000000,ood_test,recall@1,0.250000,7,99\n");

    const auto dir = std::filesystem::temp_directory_path() / "radapter_eval_csv";
    std::filesystem::create_directories(dir);
    const auto path = dir / "report.csv";
    write_csv(path, report);
    std::ifstream in(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    CHECK(bytes == csv);
    std::filesystem::remove_all(dir);
}

}  // TEST_SUITE("evalkit")
