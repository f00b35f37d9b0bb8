#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "stegdet/pipeline.hpp"
#include "stegdet/toml_lite.hpp"

using namespace stegdet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.n_images = 96;
  cfg.image_size = 64;
  cfg.victim_epochs = 3;
  cfg.epsilons = {8};
  cfg.features = {FeatureKind::spam, FeatureKind::espam};
  cfg.spam_T = 2;
  cfg.learner_step = 10;
  cfg.max_learners = 30;
  return cfg;
}

}  // namespace

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("config digest is canonical") {
  ExperimentConfig a;
  CHECK(cache_digest(a).size() == 64);
  const auto j1 = nlohmann::json::parse(R"({"seed": 3, "attack": {"kind": "igsm", "alpha": 2}})");
  const auto j2 = nlohmann::json::parse(R"({"attack": {"alpha": 2, "kind": "igsm"}, "seed": 3})");
  CHECK(cache_digest(ExperimentConfig::from_json(j1)) == cache_digest(ExperimentConfig::from_json(j2)));
  ExperimentConfig b;
  b.epsilons = {2, 6, 6 + 2};
  ExperimentConfig c;
  c.epsilons = {2, 4, 8};
  CHECK(cache_digest(b) != cache_digest(c));
  CHECK(ExperimentConfig::from_json(a.to_json()).to_json() == a.to_json());
}

TEST_CASE("config merge rejects bad input") {
  ExperimentConfig cfg;
  CHECK_THROWS_AS(cfg.merge_json(nlohmann::json::parse(R"({"bogus": 1})")), Error);
  CHECK_THROWS_AS(cfg.merge_json(nlohmann::json::parse(R"({"attack": {"epsilon": 1}})")), Error);
  CHECK_THROWS_AS(cfg.merge_json(nlohmann::json::parse(R"({"features": {"kinds": ["lbp"]}})")), Error);
  CHECK_THROWS_AS(cfg.merge_json(nlohmann::json::parse(R"({"corpus": {"size": 1.5}})")), Error);
  CHECK_THROWS_AS(cfg.merge_json(nlohmann::json::parse(R"({"seed": -1})")), Error);

  ExperimentConfig bad;
  bad.epsilons = {2.5};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.epsilons = {0};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.epsilons = {4, 4};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.features.clear();
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_NOTHROW(ExperimentConfig{}.validate());
}

TEST_CASE("settings and effective L") {
  ExperimentConfig cfg;
  CHECK(cfg.settings().size() == 4);
  CHECK(cfg.effective_L() == 1);
  cfg.n_classes = 20;
  CHECK(cfg.effective_L() == 10);
  cfg.attack = AttackKind::cw;
  REQUIRE(cfg.settings().size() == 1);
  CHECK(!cfg.settings()[0].has_value());
}

TEST_CASE("toml parsing") {
  const auto j = parse_toml(R"(# experiment
seed = 42
[attack]
kind = "igsm"   # trailing comment
epsilons = [
  2, 4,
  8,
]
alpha = 0.5
[features]
kinds = ['spam', "esrm"]
detector.reg = 1e-8
"quoted key" = true
big = 1_000
)");
  CHECK(j["seed"] == 42);
  CHECK(j["attack"]["kind"] == "igsm");
  CHECK(j["attack"]["epsilons"] == nlohmann::json::array({2, 4, 8}));
  CHECK(j["attack"]["alpha"] == 0.5);
  CHECK(j["features"]["kinds"][1] == "esrm");
  CHECK(j["features"]["detector"]["reg"] == 1e-8);
  CHECK(j["features"]["quoted key"] == true);
  CHECK(j["features"]["big"] == 1000);

  CHECK_THROWS_AS(parse_toml("a = 1\na = 2\n"), Error);
  CHECK_THROWS_AS(parse_toml("a = {b = 1}\n"), Error);
  CHECK_THROWS_AS(parse_toml("[[t]]\n"), Error);
  CHECK_THROWS_AS(parse_toml("a = inf\n"), Error);
  CHECK_THROWS_AS(parse_toml("a = \"open\n"), Error);
  CHECK_THROWS_AS(parse_toml("a = 1 2\n"), Error);
  try {
    parse_toml("x = 1\n\ny = @\n");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("toml config overlays defaults") {
  ExperimentConfig cfg;
  cfg.merge_json(parse_toml("[attack]\nkind = \"deepfool\"\n[detector]\nmax_learners = 100\n"));
  CHECK(cfg.attack == AttackKind::deepfool);
  CHECK(cfg.max_learners == 100);
  CHECK(cfg.n_images == 800);
}

TEST_CASE("shipped configs parse and desk.toml spells out the defaults") {
  const fs::path dir = fs::path(STEGDET_SOURCE_DIR) / "configs";
  CHECK(cache_digest(ExperimentConfig::from_json(load_toml(dir / "desk.toml"))) ==
        cache_digest(ExperimentConfig{}));
  for (const char* name : {"cw.toml", "igsm.toml"}) {
    const auto cfg = ExperimentConfig::from_json(load_toml(dir / name));
    CHECK_NOTHROW(cfg.validate());
  }
}

TEST_CASE("evaluate counts and errors") {
  FeatureStore normal, adv;
  normal.descriptor = adv.descriptor = "toy";
  normal.rows = Eigen::MatrixXd(4, 1);
  normal.rows << -3, -2, -1, 0.5;
  adv.rows = Eigen::MatrixXd(3, 1);
  adv.rows << 2, 3, -0.5;

  EnsembleModel m;
  m.descriptor = "toy";
  m.mean = Eigen::RowVectorXd::Zero(1);
  m.scale = Eigen::RowVectorXd::Ones(1);
  m.d_sub = 1;
  BaseLearner b;
  b.subspace = {0};
  b.w = Eigen::VectorXd::Ones(1);
  m.learners.push_back(b);

  const auto r = evaluate(m, normal, adv);
  CHECK(r.counts.tn == 3);
  CHECK(r.counts.fp == 1);
  CHECK(r.counts.tp == 2);
  CHECK(r.counts.fn == 1);
  CHECK(r.counts.tn + r.counts.fp == 4);
  CHECK(r.counts.tp + r.counts.fn == 3);
  CHECK(r.normal_accuracy == doctest::Approx(0.75));
  CHECK(r.adversarial_accuracy == doctest::Approx(2.0 / 3.0));

  CHECK_THROWS_AS(evaluate(m, normal, FeatureStore{"toy", Eigen::MatrixXd(0, 1)}), Error);
  FeatureStore other = adv;
  other.descriptor = "other";
  CHECK_THROWS_AS(evaluate(m, normal, other), Error);
  CHECK_THROWS_AS(evaluate(m, normal, Eigen::VectorXi::Zero(4)), Error);

  const auto flagged = detector_bank({m, m}, {normal, normal});
  CHECK(flagged == std::vector<bool>{false, false, false, true});
}

TEST_CASE("reference table lists all four features") {
  std::ostringstream os;
  write_reference_table(AttackKind::cw, os);
  for (const char* f : {"SPAM", "ESPAM", "SRM", "ESRM", "0.6957", "0.9341"}) {
    CHECK(os.str().find(f) != std::string::npos);
  }
}

TEST_CASE("small experiment runs, caches and is jobs invariant") {
  const fs::path root = fs::temp_directory_path() / "stegdet_pipeline_test";
  fs::remove_all(root);
  const auto cfg = tiny_config();

  const auto a = run_experiment(cfg, root / "a", 1);
  REQUIRE(a.reports.size() == 2);
  for (const auto& r : a.reports) {
    CHECK(r.counts.tn + r.counts.fp == r.counts.tp + r.counts.fn);
    CHECK(r.train_pairs >= 20);
    CHECK(r.normal_accuracy >= 0.0);
  }
  CHECK(fs::exists(root / "a" / "report.csv"));
  CHECK(fs::exists(root / "a" / "report.txt"));

  const auto csv = slurp(root / "a" / "report.csv");
  std::ostringstream log;
  const auto again = run_experiment(cfg, root / "a", 1, &log);
  CHECK(slurp(root / "a" / "report.csv") == csv);
  CHECK(again.digest == a.digest);
  CHECK(log.str().find("victim: cached") != std::string::npos);
  CHECK(log.str().find("attacking") == std::string::npos);
  CHECK(log.str().find("wrote") == std::string::npos);

  run_experiment(cfg, root / "b", 3);
  CHECK(slurp(root / "b" / "report.csv") == csv);
  for (const auto& e : fs::directory_iterator(root / "a" / "cache")) {
    if (e.path().extension() == ".feat" || e.path().extension() == ".ens") {
      CHECK(slurp(e.path()) == slurp(root / "b" / "cache" / e.path().filename()));
    }
  }
  fs::remove_all(root);
}

TEST_CASE("failing stage names itself") {
  auto cfg = tiny_config();
  cfg.n_images = 24;  // too few modified pairs for a detector
  const fs::path root = fs::temp_directory_path() / "stegdet_pipeline_fail";
  fs::remove_all(root);
  try {
    run_experiment(cfg, root, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("stage detector") != std::string::npos);
  }
  fs::remove_all(root);
}
