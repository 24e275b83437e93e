// Acceptance suite: one test case per release criterion, each printing a
// single PASS/FAIL line. Run via ctest or directly; a nonzero exit means at
// least one criterion failed.

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dynamix/analysis.hpp"
#include "dynamix/oracle.hpp"
#include "dynamix/train.hpp"
#include "dynamix/verify.hpp"

using namespace dynamix;
namespace orc = dynamix::oracle;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int id;
  std::string name;
  bool ok = true;
  std::string detail;

  Criterion(int id_, std::string name_) : id(id_), name(std::move(name_)) {}
  ~Criterion() {
    std::printf("criterion %2d [%s]: %s%s%s\n", id, name.c_str(), ok ? "PASS" : "FAIL",
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
  }
  void require(bool cond, const std::string& what) {
    CHECK(cond);
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

bool within_pct(std::uint64_t value, double target, double pct) {
  return std::abs(static_cast<double>(value) - target) <= pct / 100.0 * target;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dynamix_accept_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<Tensor<double>> gen_matrices(const Tensor<double>& x, DynaMixerOpWeights<double>& w) {
  Tape<double> tape;
  tape.recording = false;
  Binder<double> bind(tape);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  auto ps = generate_mixing_matrices(bind, tape.constant(x.reshaped({1, n, d})), w);
  std::vector<Tensor<double>> out;
  for (auto& p : ps) out.push_back(p.value.reshaped({n, n}));
  return out;
}

RunConfig learning_run() {
  auto run = RunConfig::preset("tiny");
  run.train.epochs = 8;
  run.train.max_steps = 500;
  run.train.batch_size = 32;
  run.data.synth.n_train = 2048;
  run.data.synth.n_val = 512;
  run.data.synth.noise_std = 0.1;
  return run;
}

std::pair<Dataset<double>, Dataset<double>> learning_data(const RunConfig& run) {
  auto train = synth_dataset<double>(run.data.synth.n_train, 32, 8, 10, run.data.synth.noise_std,
                                     run.train.seed + 1000, "train");
  auto val = synth_dataset<double>(run.data.synth.n_val, 32, 8, 10, run.data.synth.noise_std,
                                   run.train.seed + 2000, "val");
  return {std::move(train), std::move(val)};
}

}  // namespace

TEST_CASE("criterion 1: parameter capacity") {
  Criterion c(1, "params within 3% of 26M/57M/97M");
  c.require(within_pct(count_params(ModelConfig::preset("dynamixer-s")).total_params(), 26e6, 3.0),
            "dynamixer-s");
  c.require(within_pct(count_params(ModelConfig::preset("dynamixer-m")).total_params(), 57e6, 3.0),
            "dynamixer-m");
  c.require(within_pct(count_params(ModelConfig::preset("dynamixer-l")).total_params(), 97e6, 3.0),
            "dynamixer-l");
}

TEST_CASE("criterion 2: compute capacity") {
  Criterion c(2, "MACs within 10% of 7.3G/17.0G/27.4G");
  c.require(within_pct(count_flops(ModelConfig::preset("dynamixer-s")).total_macs(), 7.3e9, 10.0),
            "dynamixer-s");
  c.require(within_pct(count_flops(ModelConfig::preset("dynamixer-m")).total_macs(), 17.0e9, 10.0),
            "dynamixer-m");
  c.require(within_pct(count_flops(ModelConfig::preset("dynamixer-l")).total_macs(), 27.4e9, 10.0),
            "dynamixer-l");
}

TEST_CASE("criterion 3: parameter formula exactness") {
  Criterion c(3, "enumerated op params equal S*D*d + N^3*d + D^2");
  const std::size_t ns[] = {1, 2, 4, 8, 16, 32};
  const std::size_t ss[] = {1, 2, 4, 8};
  const std::size_t ds[] = {8, 16, 192};
  const std::size_t rs[] = {1, 2, 8};
  for (std::size_t n : ns) {
    for (std::size_t s : ss) {
      for (std::size_t d : ds) {
        if (d % s != 0) continue;
        for (std::size_t r : rs) {
          auto w = detail::make_op_weights<double>(MixGenKind::Dynamic, n, d, s, r);
          c.require(w.param_count() == orc::param_formula(n, d, r, s),
                    "mismatch at N=" + std::to_string(n) + " D=" + std::to_string(d) +
                        " d=" + std::to_string(r) + " S=" + std::to_string(s));
        }
      }
    }
  }
}

TEST_CASE("criterion 4: oracle equivalence on 200 random instances") {
  Criterion c(4, "vectorized op and block match loop oracles within 1e-12");
  std::size_t instances = 0;

  // 120 op instances across all generator kinds.
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    const std::size_t n = 1 + seed % 8;
    const std::size_t s = 1 + seed % 2;
    const std::size_t d = s * (1 + seed % 6);
    const std::size_t r = 1 + seed % 3;
    const auto kind = static_cast<MixGenKind>(seed % 3);
    auto inst = orc::random_instance(n, d, s, r, kind, 9000 + seed);
    Tape<double> tape;
    tape.recording = false;
    Binder<double> bind(tape);
    auto y = dynamixer_op(bind, tape.constant(inst.x), inst.w);
    c.require(max_abs_diff(y.value, orc::naive_dynamixer_op(inst)) < 1e-12,
              "op instance seed " + std::to_string(seed));
    ++instances;
  }

  // 80 block instances, H, W <= 8, with and without reweighting.
  for (std::uint64_t seed = 0; seed < 80; ++seed) {
    const std::size_t h = 1 + seed % 8;
    const std::size_t w = 1 + (seed / 2) % 8;
    const std::size_t s = 1 + seed % 2;
    const std::size_t d = 4 * s;
    Rng rng(7000 + seed);

    BlockWeights<double> bw;
    bw.row_op = detail::make_op_weights<double>(MixGenKind::Dynamic, w, d, s, 1 + seed % 2);
    bw.col_op = detail::make_op_weights<double>(MixGenKind::Dynamic, h, d, s, 1 + seed % 2);
    auto fill = [&rng](Tensor<double>& t) {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.5;
    };
    for (auto* op : {&*bw.row_op, &*bw.col_op}) {
      for (auto& t : op->reduce) fill(t);
      fill(op->gen);
      fill(op->out_fuse);
    }
    bw.proj_c = LinearW<double>{Tensor<double>({d, d}), Tensor<double>({d})};
    fill(bw.proj_c->w);
    fill(bw.proj_c->b);
    bw.proj_o = LinearW<double>{Tensor<double>({d, d}), Tensor<double>({d})};
    fill(bw.proj_o.w);
    fill(bw.proj_o.b);
    if (seed % 2 == 0) {
      bw.reweight = ReweightW<double>{Tensor<double>({d, d / 4}), Tensor<double>({d / 4, 3 * d})};
      fill(bw.reweight->w1);
      fill(bw.reweight->w2);
    }
    Tensor<double> x = randn<double>({h, w, d}, rng);

    Tape<double> tape;
    tape.recording = false;
    Binder<double> bind(tape);
    auto y = dynamixer_block(bind, tape.constant(x.reshaped({1, h, w, d})), bw);
    c.require(max_abs_diff(y.value.reshaped({h, w, d}), orc::naive_dynamixer_block(x, bw)) <
                  1e-12,
              "block instance seed " + std::to_string(seed));
    ++instances;
  }
  c.require(instances == 200, "expected 200 instances");
}

TEST_CASE("criterion 5: end-to-end gradient correctness") {
  Criterion c(5, "tiny-model gradcheck, eps 1e-4, 500+ coords, max rel err < 1e-4");
  auto report = model_grad_check<double>(ModelConfig::preset("tiny"), 1, 1e-4, 500);
  c.detail = "max_rel_err " + std::to_string(report.max_rel_err);
  c.require(report.coords_checked >= 500, "coordinate sample too small");
  c.require(report.max_rel_err < 1e-4, "gradient mismatch");
}

TEST_CASE("criterion 6: generator sensitivity signatures") {
  Criterion c(6, "static input-free; dense row-local; dynamic cross-token and cross-segment");

  {
    auto inst = orc::random_instance(5, 10, 2, 1, MixGenKind::StaticRandom, 61);
    Rng rng(62);
    Tensor<double> other = randn<double>({5, 10}, rng, 2.0);
    auto p1 = gen_matrices(inst.x, inst.w);
    auto p2 = gen_matrices(other, inst.w);
    for (std::size_t s = 0; s < p1.size(); ++s) {
      c.require(max_abs_diff(p1[s], p2[s]) == 0.0, "static matrices moved with the input");
    }
  }
  {
    auto inst = orc::random_instance(6, 8, 2, 1, MixGenKind::DensePerToken, 63);
    const std::size_t j = 4;
    Tensor<double> perturbed = inst.x.clone();
    perturbed(j, std::size_t{2}) += 0.25;
    auto base = gen_matrices(inst.x, inst.w);
    auto moved = gen_matrices(perturbed, inst.w);
    for (std::size_t s = 0; s < base.size(); ++s) {
      double off_row = 0.0;
      for (std::size_t i = 0; i < 6; ++i) {
        if (i == j) continue;
        for (std::size_t k = 0; k < 6; ++k) {
          off_row = std::max(off_row, std::abs(base[s](i, k) - moved[s](i, k)));
        }
      }
      c.require(off_row < 1e-12, "dense perturbation leaked off-row");
    }
  }
  {
    auto inst = orc::random_instance(6, 8, 2, 1, MixGenKind::Dynamic, 64);
    const std::size_t j = 1;
    Tensor<double> perturbed = inst.x.clone();
    perturbed(j, std::size_t{0}) += 0.1;
    auto base = gen_matrices(inst.x, inst.w);
    auto moved = gen_matrices(perturbed, inst.w);
    double off_row = 0.0;
    for (std::size_t s = 0; s < base.size(); ++s) {
      for (std::size_t i = 0; i < 6; ++i) {
        if (i == j) continue;
        for (std::size_t k = 0; k < 6; ++k) {
          off_row = std::max(off_row, std::abs(base[s](i, k) - moved[s](i, k)));
        }
      }
    }
    c.require(off_row > 1e-6, "dynamic generation did not react to other tokens");

    // Perturb a channel inside segment 1 and watch segment 0's matrix move.
    Tensor<double> cross = inst.x.clone();
    cross(std::size_t{2}, std::size_t{6}) += 0.1;
    auto crossed = gen_matrices(cross, inst.w);
    c.require(max_abs_diff(base[0], crossed[0]) > 1e-9,
              "segments were independent, expected coupling");
  }
}

TEST_CASE("criterion 7: row stochasticity under fuzz") {
  Criterion c(7, "dynamic/dense matrices have rows summing to 1 within 1e-6");
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto kind = (seed % 2 == 0) ? MixGenKind::Dynamic : MixGenKind::DensePerToken;
    const std::size_t n = 2 + seed % 7;
    const std::size_t s = 1 + seed % 3;
    const std::size_t d = s * (1 + seed % 4);
    auto inst = orc::random_instance(n, d, s, 1 + seed % 2, kind, 7700 + seed, 1.5);
    auto ps = gen_matrices(inst.x, inst.w);
    for (const auto& p : ps) {
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        bool in_range = true;
        for (std::size_t k = 0; k < n; ++k) {
          sum += p(i, k);
          in_range = in_range && p(i, k) >= 0.0 && p(i, k) <= 1.0 + 1e-12;
        }
        c.require(in_range && std::abs(sum - 1.0) < 1e-6,
                  "bad row at fuzz seed " + std::to_string(seed));
      }
    }
  }
}

TEST_CASE("criterion 8: learning sanity on the synthetic corpus") {
  Criterion c(8, "tiny preset: 95% train / 90% val top-1 within 500 steps, seed stable");
  auto run = learning_run();
  auto [train_set, val_set] = learning_data(run);

  TempDir d1("learn_a");
  auto r1 = train_model(run, train_set, val_set, d1.str());
  c.require(r1.steps <= 500, "step budget exceeded");

  auto ck = load_checkpoint<double>(r1.final_checkpoint);
  const double train_top1 = evaluate(ck.weights, ck.config, train_set);
  const double val_top1 = evaluate(ck.weights, ck.config, val_set);
  c.detail = "train_top1 " + std::to_string(train_top1) + ", val_top1 " +
             std::to_string(val_top1);
  c.require(train_top1 >= 0.95, "train accuracy below 95%");
  c.require(val_top1 >= 0.90, "val accuracy below 90%");

  TempDir d2("learn_b");
  auto r2 = train_model(run, train_set, val_set, d2.str());
  c.require(slurp(r1.metrics_path) == slurp(r2.metrics_path),
            "same seed produced different metrics");

  if (const char* dir = std::getenv("DYNAMIXER_CIFAR10_DIR")) {
    auto cifar_run = RunConfig::preset("tiny");
    cifar_run.train.epochs = 10;
    cifar_run.data.kind = "cifar10";
    cifar_run.data.dir = dir;
    auto [ctrain, cval] = load_cifar10<double>(dir);
    TempDir d3("learn_cifar");
    auto r3 = train_model(cifar_run, ctrain, cval, d3.str());
    std::printf("  optional cifar10 check: val_top1 %.4f (target > 0.50)\n", r3.final_val_top1);
    c.require(r3.final_val_top1 > 0.50, "cifar10 extended check below 50%");
  } else {
    std::printf("  optional cifar10 check skipped (set DYNAMIXER_CIFAR10_DIR to enable)\n");
  }
}

TEST_CASE("criterion 9: ablation plumbing") {
  Criterion c(9, "each ablation flag builds, trains one step, and shifts params by the formula");
  const auto base_cfg = ModelConfig::preset("tiny");
  const std::uint64_t base_params = count_params(base_cfg).total_params();

  auto per_stage = [&](const ModelConfig& cfg, auto&& per_layer) -> std::uint64_t {
    return cfg.stage1.depth * per_layer(cfg.grid1(), cfg.stage1.hidden, cfg.stage1.segments) +
           cfg.stage2.depth * per_layer(cfg.grid2(), cfg.stage2.hidden, cfg.stage2.segments);
  };
  const std::uint64_t op_total = per_stage(base_cfg, [&](std::uint64_t n, std::uint64_t d,
                                                         std::uint64_t s) {
    return orc::param_formula(n, d, base_cfg.reduced_dim, s);
  });
  const std::uint64_t reweight_shrink =
      per_stage(base_cfg, [](std::uint64_t, std::uint64_t d, std::uint64_t) {
        return d / 4 * d;  // one branch of the reweight logits goes away
      });
  const std::uint64_t proj_total =
      per_stage(base_cfg, [](std::uint64_t, std::uint64_t d, std::uint64_t) {
        return d * d + d;
      });
  const std::uint64_t reweight_total =
      per_stage(base_cfg, [](std::uint64_t, std::uint64_t d, std::uint64_t) {
        return d * (d / 4) + (d / 4) * 3 * d;
      });

  struct Case {
    const char* name;
    void (*apply)(ModelConfig&);
    std::uint64_t expected_delta;
  };
  const Case cases[] = {
      {"disable_row", [](ModelConfig& m) { m.disable_row = true; }, op_total + reweight_shrink},
      {"disable_col", [](ModelConfig& m) { m.disable_col = true; }, op_total + reweight_shrink},
      {"disable_channel", [](ModelConfig& m) { m.disable_channel = true; },
       proj_total + reweight_shrink},
      {"disable_reweight", [](ModelConfig& m) { m.disable_reweight = true; }, reweight_total},
      {"share_row_col", [](ModelConfig& m) { m.share_row_col = true; }, op_total},
  };

  auto train_set = synth_dataset<double>(16, 32, 8, 10, 0.1, 91, "train");
  auto val_set = synth_dataset<double>(8, 32, 8, 10, 0.1, 92, "val");
  for (const auto& cs : cases) {
    auto run = RunConfig::preset("tiny");
    cs.apply(run.model);
    run.train.max_steps = 1;
    run.train.batch_size = 8;
    run.train.epochs = 1;

    const std::uint64_t counted = count_params(run.model).total_params();
    c.require(base_params - counted == cs.expected_delta,
              std::string(cs.name) + ": closed-form delta mismatch");

    auto weights = build_model<double>(run.model, 93);
    c.require(parameter_count(weights, run.model) == counted,
              std::string(cs.name) + ": enumeration disagrees with the counter");

    TempDir dir(std::string("ablate_") + cs.name);
    bool trained = true;
    try {
      auto res = train_model(run, train_set, val_set, dir.str());
      trained = res.steps == 1;
    } catch (const std::exception&) {
      trained = false;
    }
    c.require(trained, std::string(cs.name) + ": one-step training failed");
  }
}

TEST_CASE("criterion 10: checkpoint serialization") {
  Criterion c(10, "round-trip is byte-exact and evaluation is bit-identical");
  TempDir dir("serialize");
  auto run = RunConfig::preset("tiny");
  run.train.max_steps = 4;
  run.train.batch_size = 8;
  auto train_set = synth_dataset<double>(32, 32, 8, 10, 0.1, 101, "train");
  auto val_set = synth_dataset<double>(16, 32, 8, 10, 0.1, 102, "val");
  auto result = train_model(run, train_set, val_set, dir.str());

  auto ck = load_checkpoint<double>(result.final_checkpoint);
  const std::string resaved = dir.str() + "/resaved.dyx";
  {
    AdamW<double> opt(parameters(ck.weights, ck.config));
    opt.moments_m() = ck.opt_m;
    opt.moments_v() = ck.opt_v;
    opt.set_steps(static_cast<std::size_t>(ck.opt_step));
    save_checkpoint(resaved, ck.weights, ck.config, ck.has_train ? &ck.train : nullptr,
                    ck.has_data ? &ck.data : nullptr, &opt);
  }
  c.require(slurp(result.final_checkpoint) == slurp(resaved),
            "save -> load -> save changed bytes");

  const double before = evaluate(ck.weights, ck.config, val_set);
  auto again = load_checkpoint<double>(resaved);
  const double after = evaluate(again.weights, again.config, val_set);
  c.require(before == after, "accuracy moved across the round trip");
  c.require(before == result.final_val_top1, "accuracy does not match the training log");
}
