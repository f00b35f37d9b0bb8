#include "stegdet/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <openssl/evp.h>

namespace stegdet {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config --

std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::spam: return "spam";
    case FeatureKind::espam: return "espam";
    case FeatureKind::srmlite: return "srmlite";
    case FeatureKind::esrm: return "esrm";
  }
  return "?";
}

FeatureKind feature_from_string(const std::string& s) {
  if (s == "spam") return FeatureKind::spam;
  if (s == "espam") return FeatureKind::espam;
  if (s == "srmlite") return FeatureKind::srmlite;
  if (s == "esrm") return FeatureKind::esrm;
  throw Error("unknown feature '" + s + "' (expected spam, espam, srmlite or esrm)");
}

bool is_enhanced(FeatureKind k) { return k == FeatureKind::espam || k == FeatureKind::esrm; }

void ExperimentConfig::validate() const {
  if (n_images < 8) throw Error("config: corpus needs at least 8 images");
  if (image_size < 64) throw Error("config: image size must be at least 64");
  if (n_classes < 2) throw Error("config: at least 2 classes are needed");
  if (victim_epochs < 1 || victim_batch < 1) throw Error("config: victim epochs and batch must be >= 1");
  if (!(victim_learning_rate > 0.0) || !std::isfinite(victim_learning_rate)) {
    throw Error("config: victim learning rate must be positive");
  }
  if (attack == AttackKind::fgsm || attack == AttackKind::igsm) {
    if (epsilons.empty()) throw Error("config: epsilon grid is empty");
  }
  std::set<double> seen;
  for (const double e : epsilons) {
    if (!(e > 0.0) || e != std::floor(e) || e > 255.0) {
      throw Error("config: epsilon values must be positive integers, got " + std::to_string(e));
    }
    if (!seen.insert(e).second) throw Error("config: duplicate epsilon");
  }
  attack_config(epsilons.empty() ? 1.0 : epsilons.front()).validate();
  if (features.empty()) throw Error("config: no features selected");
  if (mpm_L < 1) throw Error("config: mpm L must be at least 1");
  spam_config().validate();
  rich_config().validate();
  if (learner_step < 1 || max_learners < learner_step) throw Error("config: invalid learner schedule");
  if (!(min_improvement >= 0.0) || !(reg >= 0.0)) throw Error("config: negative detector parameter");
}

json ExperimentConfig::to_json() const {
  json f = json::array();
  for (const auto k : features) f.push_back(to_string(k));
  return json{
      {"seed", seed},
      {"corpus", {{"n_images", n_images}, {"size", image_size}, {"n_classes", n_classes}}},
      {"victim",
       {{"epochs", victim_epochs}, {"batch_size", victim_batch}, {"learning_rate", victim_learning_rate}}},
      {"attack",
       {{"kind", to_string(attack)},
        {"epsilons", epsilons},
        {"alpha", alpha},
        {"max_iters", max_iters},
        {"kappa", kappa},
        {"c_grid", c_grid},
        {"cw_steps", cw_steps},
        {"cw_learning_rate", cw_learning_rate},
        {"overshoot", overshoot}}},
      {"features",
       {{"kinds", f}, {"mpm_L", mpm_L}, {"spam_T", spam_T}, {"spam_order", spam_order}, {"srm_T", srm_T}}},
      {"detector",
       {{"learner_step", learner_step},
        {"max_learners", max_learners},
        {"min_improvement", min_improvement},
        {"reg", reg}}},
  };
}

namespace {

template <typename T>
T json_number(const json& v, const std::string& key) {
  if (!v.is_number()) throw Error("config: '" + key + "' must be a number");
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
      throw Error("config: '" + key + "' must be an integer");
    }
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && v.get<long long>() < 0) {
        throw Error("config: '" + key + "' must be non-negative");
      }
    }
  }
  return v.get<T>();
}

std::vector<double> json_doubles(const json& v, const std::string& key) {
  if (!v.is_array()) throw Error("config: '" + key + "' must be an array");
  std::vector<double> out;
  for (const auto& x : v) out.push_back(json_number<double>(x, key));
  return out;
}

}  // namespace

void ExperimentConfig::merge_json(const json& j) {
  if (!j.is_object()) throw Error("config: top level must be a table");
  auto section = [&](const char* name, const std::map<std::string, std::function<void(const json&)>>& fields) {
    if (!j.contains(name)) return;
    const json& s = j.at(name);
    if (!s.is_object()) throw Error(std::string("config: '") + name + "' must be a table");
    for (const auto& [key, value] : s.items()) {
      const auto it = fields.find(key);
      if (it == fields.end()) throw Error("config: unknown key '" + std::string(name) + "." + key + "'");
      it->second(value);
    }
  };
  static const std::set<std::string> top = {"seed", "corpus", "victim", "attack", "features", "detector"};
  for (const auto& [key, value] : j.items()) {
    if (!top.count(key)) throw Error("config: unknown key '" + key + "'");
  }
  if (j.contains("seed")) seed = json_number<std::uint64_t>(j.at("seed"), "seed");
  section("corpus", {{"n_images", [&](const json& v) { n_images = json_number<std::size_t>(v, "n_images"); }},
                     {"size", [&](const json& v) { image_size = json_number<int>(v, "size"); }},
                     {"n_classes", [&](const json& v) { n_classes = json_number<int>(v, "n_classes"); }}});
  section("victim",
          {{"epochs", [&](const json& v) { victim_epochs = json_number<int>(v, "epochs"); }},
           {"batch_size", [&](const json& v) { victim_batch = json_number<int>(v, "batch_size"); }},
           {"learning_rate",
            [&](const json& v) { victim_learning_rate = json_number<double>(v, "learning_rate"); }}});
  section("attack",
          {{"kind",
            [&](const json& v) {
              if (!v.is_string()) throw Error("config: 'attack.kind' must be a string");
              attack = attack_from_string(v.get<std::string>());
            }},
           {"epsilons", [&](const json& v) { epsilons = json_doubles(v, "epsilons"); }},
           {"alpha", [&](const json& v) { alpha = json_number<double>(v, "alpha"); }},
           {"max_iters", [&](const json& v) { max_iters = json_number<int>(v, "max_iters"); }},
           {"kappa", [&](const json& v) { kappa = json_number<double>(v, "kappa"); }},
           {"c_grid", [&](const json& v) { c_grid = json_doubles(v, "c_grid"); }},
           {"cw_steps", [&](const json& v) { cw_steps = json_number<int>(v, "cw_steps"); }},
           {"cw_learning_rate",
            [&](const json& v) { cw_learning_rate = json_number<double>(v, "cw_learning_rate"); }},
           {"overshoot", [&](const json& v) { overshoot = json_number<double>(v, "overshoot"); }}});
  section("features",
          {{"kinds",
            [&](const json& v) {
              if (!v.is_array()) throw Error("config: 'features.kinds' must be an array");
              features.clear();
              for (const auto& k : v) {
                if (!k.is_string()) throw Error("config: feature names must be strings");
                features.push_back(feature_from_string(k.get<std::string>()));
              }
            }},
           {"mpm_L", [&](const json& v) { mpm_L = json_number<int>(v, "mpm_L"); }},
           {"spam_T", [&](const json& v) { spam_T = json_number<int>(v, "spam_T"); }},
           {"spam_order", [&](const json& v) { spam_order = json_number<int>(v, "spam_order"); }},
           {"srm_T", [&](const json& v) { srm_T = json_number<int>(v, "srm_T"); }}});
  section("detector",
          {{"learner_step", [&](const json& v) { learner_step = json_number<int>(v, "learner_step"); }},
           {"max_learners", [&](const json& v) { max_learners = json_number<int>(v, "max_learners"); }},
           {"min_improvement",
            [&](const json& v) { min_improvement = json_number<double>(v, "min_improvement"); }},
           {"reg", [&](const json& v) { reg = json_number<double>(v, "reg"); }}});
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  cfg.merge_json(j);
  return cfg;
}

CorpusParams ExperimentConfig::corpus_params() const {
  CorpusParams p;
  p.n_images = n_images;
  p.size = image_size;
  p.n_classes = n_classes;
  p.seed = seed;
  return p;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.epochs = victim_epochs;
  t.batch_size = victim_batch;
  t.learning_rate = victim_learning_rate;
  t.seed = mix_seed(seed, 1);
  return t;
}

AttackConfig ExperimentConfig::attack_config(double epsilon) const {
  AttackConfig a;
  a.epsilon = epsilon;
  a.alpha = alpha;
  a.max_iters = max_iters;
  a.kappa = kappa;
  a.c_grid = c_grid;
  a.cw_steps = cw_steps;
  a.cw_learning_rate = cw_learning_rate;
  a.overshoot = overshoot;
  return a;
}

SpamConfig ExperimentConfig::spam_config() const {
  SpamConfig s;
  s.T = spam_T;
  if (spam_order != 1 && spam_order != 2) throw Error("config: spam_order must be 1 or 2");
  s.order = spam_order == 1 ? MarkovOrder::first : MarkovOrder::second;
  return s;
}

RichModelConfig ExperimentConfig::rich_config() const {
  RichModelConfig r;
  r.T = srm_T;
  return r;
}

EnsembleParams ExperimentConfig::ensemble_params(int jobs) const {
  EnsembleParams p;
  p.reg = reg;
  p.learner_step = learner_step;
  p.max_learners = max_learners;
  p.min_improvement = min_improvement;
  p.jobs = jobs;
  return p;
}

int ExperimentConfig::effective_L() const { return std::min(mpm_L, n_classes - 1); }

std::vector<std::optional<double>> ExperimentConfig::settings() const {
  std::vector<std::optional<double>> out;
  if (attack == AttackKind::fgsm || attack == AttackKind::igsm) {
    for (const double e : epsilons) out.emplace_back(e);
  } else {
    out.emplace_back(std::nullopt);
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

// nlohmann::json keeps object keys sorted, so dump() is canonical.
std::string cache_digest(const ExperimentConfig& cfg) { return sha256_hex(cfg.to_json().dump()); }

// ------------------------------------------------------- batch operations --

std::vector<AttackResult> attack_batch(AttackKind kind, const VictimModel& model,
                                       const std::vector<GrayImage>& images,
                                       const std::vector<int>& labels, const AttackConfig& cfg,
                                       int jobs) {
  if (images.size() != labels.size()) throw Error("attack batch: image/label count mismatch");
  std::vector<AttackResult> out(images.size());
  parallel_for(images.size(), jobs,
               [&](std::size_t i) { out[i] = run_attack(kind, model, images[i], labels[i], cfg); });
  return out;
}

std::string adversarial_name(const std::string& path, const std::string& tag) {
  return fs::path(path).stem().string() + ".adv-" + tag + ".pgm";
}

void write_attack_csv(const std::vector<std::string>& paths, const std::vector<AttackResult>& results,
                      std::ostream& os) {
  if (paths.size() != results.size()) throw Error("attack csv: path/result count mismatch");
  os << "path,success,linf,l2,iterations\n";
  char buf[128];
  for (std::size_t i = 0; i < paths.size(); ++i) {
    std::snprintf(buf, sizeof buf, ",%d,%.17g,%.17g,%d\n", results[i].success ? 1 : 0, results[i].linf,
                  results[i].l2, results[i].iterations);
    os << paths[i] << buf;
  }
}

ProbMap estimate_mpm(AttackKind attack, const VictimModel& model, const GrayImage& x,
                     const ExperimentConfig& cfg, std::uint64_t seed, int jobs) {
  MpmConfig m;
  m.L = cfg.effective_L();
  m.seed = seed;
  const int predicted = predict_class(model, x);
  switch (attack) {
    case AttackKind::fgsm:
    case AttackKind::igsm: return mpm_gradient(model, x, m);
    case AttackKind::deepfool: {
      const auto r = deepfool(model, x, predicted, cfg.attack_config(1.0));
      return mpm_untargeted_diff(x, r.adversarial);
    }
    case AttackKind::cw: {
      const AttackConfig base = cfg.attack_config(1.0);
      TargetedAttack targeted = [&](const GrayImage& img, int target) {
        AttackConfig c = base;
        c.target = target;
        return cw_l2(model, img, predicted, c);
      };
      return mpm_difference(model, x, m, targeted, jobs);
    }
  }
  throw Error("unknown attack kind");
}

FeatureStore extract_features(FeatureKind kind, const ExperimentConfig& cfg,
                              const std::vector<GrayImage>& images, const MpmSource& mpm, int jobs) {
  if (is_enhanced(kind) && !mpm) throw Error("enhanced features need a probability map source");
  const SpamConfig sc = cfg.spam_config();
  const RichModelConfig rc = cfg.rich_config();
  const bool rich = kind == FeatureKind::srmlite || kind == FeatureKind::esrm;
  FeatureStore store;
  store.descriptor = rich ? rc.descriptor(is_enhanced(kind)) : sc.descriptor(is_enhanced(kind));
  store.rows.resize(static_cast<Eigen::Index>(images.size()), rich ? rc.dimension() : sc.dimension());
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    FeatureVector f;
    switch (kind) {
      case FeatureKind::spam: f = spam_features(images[i], sc); break;
      case FeatureKind::espam: f = espam_features(images[i], mpm(i), sc); break;
      case FeatureKind::srmlite: f = srm_features(images[i], rc); break;
      case FeatureKind::esrm: f = esrm_features(images[i], mpm(i), rc); break;
    }
    store.rows.row(static_cast<Eigen::Index>(i)) = f.values.transpose();
  });
  return store;
}

// ------------------------------------------------------------ evaluation --

DetectionReport evaluate(const EnsembleModel& model, const FeatureStore& features,
                         const Eigen::VectorXi& labels) {
  if (features.descriptor != model.descriptor) {
    throw Error("descriptor mismatch: detector '" + model.descriptor + "' vs features '" +
                features.descriptor + "'");
  }
  if (features.size() == 0) throw Error("empty evaluation set");
  if (labels.size() != features.size()) throw Error("label count does not match feature rows");
  const auto n_adv = (labels.array() == kAdversarial).count();
  const auto n_norm = (labels.array() == kNormal).count();
  if (n_adv + n_norm != labels.size()) throw Error("labels must be 0 (normal) or 1 (adversarial)");
  if (n_adv == 0 || n_norm == 0) throw Error("single-class evaluation");

  const auto preds = predict_all(model, features.rows);
  DetectionReport r;
  r.feature = features.descriptor;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const bool flagged = preds[static_cast<std::size_t>(i)].label == kAdversarial;
    if (labels(i) == kNormal) {
      ++(flagged ? r.counts.fp : r.counts.tn);
    } else {
      ++(flagged ? r.counts.tp : r.counts.fn);
    }
  }
  r.normal_accuracy = static_cast<double>(r.counts.tn) / static_cast<double>(r.counts.tn + r.counts.fp);
  r.adversarial_accuracy =
      static_cast<double>(r.counts.tp) / static_cast<double>(r.counts.tp + r.counts.fn);
  r.average_accuracy = 0.5 * (r.normal_accuracy + r.adversarial_accuracy);
  r.d_sub = model.d_sub;
  r.learners = static_cast<int>(model.size());
  return r;
}

std::pair<FeatureStore, Eigen::VectorXi> stack_labelled(const FeatureStore& normal,
                                                        const FeatureStore& adversarial) {
  if (normal.descriptor != adversarial.descriptor) {
    throw Error("descriptor mismatch: '" + normal.descriptor + "' vs '" + adversarial.descriptor + "'");
  }
  if (normal.size() > 0 && adversarial.size() > 0 && normal.dimension() != adversarial.dimension()) {
    throw Error("feature dimension mismatch");
  }
  FeatureStore all;
  all.descriptor = normal.descriptor;
  const Eigen::Index d = normal.size() > 0 ? normal.dimension() : adversarial.dimension();
  all.rows.resize(normal.size() + adversarial.size(), d);
  if (normal.size() > 0) all.rows.topRows(normal.size()) = normal.rows;
  if (adversarial.size() > 0) all.rows.bottomRows(adversarial.size()) = adversarial.rows;
  Eigen::VectorXi labels(all.size());
  labels.head(normal.size()).setConstant(kNormal);
  labels.tail(adversarial.size()).setConstant(kAdversarial);
  return {std::move(all), std::move(labels)};
}

DetectionReport evaluate(const EnsembleModel& model, const FeatureStore& normal,
                         const FeatureStore& adversarial) {
  if (adversarial.size() == 0) throw Error("empty adversarial set");
  if (normal.size() == 0) throw Error("empty normal set");
  const auto [all, labels] = stack_labelled(normal, adversarial);
  return evaluate(model, all, labels);
}

std::vector<bool> detector_bank(const std::vector<EnsembleModel>& detectors,
                                const std::vector<FeatureStore>& rows) {
  if (detectors.empty() || detectors.size() != rows.size()) {
    throw Error("detector bank needs one feature table per detector");
  }
  const Eigen::Index n = rows.front().size();
  std::vector<bool> flagged(static_cast<std::size_t>(n), false);
  for (std::size_t k = 0; k < detectors.size(); ++k) {
    if (rows[k].descriptor != detectors[k].descriptor) {
      throw Error("descriptor mismatch in detector bank entry " + std::to_string(k));
    }
    if (rows[k].size() != n) throw Error("detector bank tables cover different images");
    const auto preds = predict_all(detectors[k], rows[k].rows);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (preds[static_cast<std::size_t>(i)].label == kAdversarial) flagged[static_cast<std::size_t>(i)] = true;
    }
  }
  return flagged;
}

// --------------------------------------------------------------- reports --

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string epsilon_label(const std::optional<double>& e) {
  return e ? fmt("%g", *e) : std::string("-");
}

}  // namespace

void write_report_csv(const std::vector<DetectionReport>& reports, std::ostream& os) {
  os << "attack,epsilon,feature,normal_accuracy,adversarial_accuracy,average_accuracy,"
        "tn,fp,fn,tp,oob_error,d_sub,learners,train_pairs\n";
  for (const auto& r : reports) {
    os << r.attack << ',' << epsilon_label(r.epsilon) << ',' << r.feature << ','
       << fmt("%.6f", r.normal_accuracy) << ',' << fmt("%.6f", r.adversarial_accuracy) << ','
       << fmt("%.6f", r.average_accuracy) << ',' << r.counts.tn << ',' << r.counts.fp << ','
       << r.counts.fn << ',' << r.counts.tp << ',' << fmt("%.6f", r.oob_error) << ',' << r.d_sub << ','
       << r.learners << ',' << r.train_pairs << '\n';
  }
}

void write_report_table(const std::vector<DetectionReport>& reports, std::ostream& os) {
  // Group by feature, keeping first-appearance order; columns are settings.
  std::vector<std::string> feats;
  std::vector<std::optional<double>> cols;
  for (const auto& r : reports) {
    if (std::find(feats.begin(), feats.end(), r.feature) == feats.end()) feats.push_back(r.feature);
    if (std::find(cols.begin(), cols.end(), r.epsilon) == cols.end()) cols.push_back(r.epsilon);
  }
  auto find = [&](const std::string& f, const std::optional<double>& e) -> const DetectionReport* {
    for (const auto& r : reports) {
      if (r.feature == f && r.epsilon == e) return &r;
    }
    return nullptr;
  };
  auto cell = [&](const DetectionReport* r, double DetectionReport::*field) {
    return r ? fmt("%.4f", r->*field) : std::string("n/a");
  };
  const int w0 = 22, w = 10;
  for (const auto& f : feats) {
    os << std::left << std::setw(w0) << f;
    for (const auto& c : cols) os << std::right << std::setw(w) << (c ? "eps=" + epsilon_label(c) : "acc");
    os << '\n';
    const std::pair<const char*, double DetectionReport::*> rows[] = {
        {"normal images", &DetectionReport::normal_accuracy},
        {"adversarial images", &DetectionReport::adversarial_accuracy},
        {"average", &DetectionReport::average_accuracy},
        {"oob error", &DetectionReport::oob_error}};
    for (const auto& [name, field] : rows) {
      os << std::left << std::setw(w0) << std::string("  ") + name;
      for (const auto& c : cols) os << std::right << std::setw(w) << cell(find(f, c), field);
      os << '\n';
    }
  }
}

void write_reference_table(AttackKind attack, std::ostream& os) {
  struct Row {
    const char* feature;
    std::vector<double> normal, adversarial;
  };
  std::vector<Row> rows;
  std::vector<std::string> cols;
  switch (attack) {
    case AttackKind::fgsm:
      cols = {"eps=2", "eps=4", "eps=6", "eps=8"};
      rows = {{"SPAM", {0.9488, 0.9570, 0.9651, 0.9713}, {0.9432, 0.9559, 0.9628, 0.9709}},
              {"ESPAM", {0.9725, 0.9758, 0.9812, 0.9868}, {0.9704, 0.9719, 0.9751, 0.9806}},
              {"SRM", {0.9757, 0.9814, 0.9831, 0.9887}, {0.9785, 0.9822, 0.9861, 0.9903}},
              {"ESRM", {0.9809, 0.9839, 0.9900, 0.9931}, {0.9811, 0.9866, 0.9905, 0.9938}}};
      break;
    case AttackKind::igsm:
      cols = {"eps=2", "eps=4", "eps=6", "eps=8"};
      rows = {{"SPAM", {0.9402, 0.9485, 0.9559, 0.9606}, {0.9411, 0.9474, 0.9545, 0.9601}},
              {"ESPAM", {0.9708, 0.9737, 0.9749, 0.9760}, {0.9638, 0.9675, 0.9725, 0.9745}},
              {"SRM", {0.9667, 0.9706, 0.9753, 0.9802}, {0.9697, 0.9724, 0.9762, 0.9812}},
              {"ESRM", {0.9712, 0.9754, 0.9811, 0.9878}, {0.9716, 0.9767, 0.9820, 0.9879}}};
      break;
    case AttackKind::deepfool:
      cols = {"acc"};
      rows = {{"SPAM", {0.8553}, {0.8481}},
              {"ESPAM", {0.8870}, {0.8629}},
              {"SRM", {0.9445}, {0.9491}},
              {"ESRM", {0.9498}, {0.9527}}};
      break;
    case AttackKind::cw:
      cols = {"acc"};
      rows = {{"SPAM", {0.6957}, {0.6778}},
              {"ESPAM", {0.8025}, {0.8296}},
              {"SRM", {0.8814}, {0.9092}},
              {"ESRM", {0.9233}, {0.9341}}};
      break;
  }
  os << "Published reference accuracies for " << to_string(attack)
     << " (ImageNet-1000, VGG-16, full 34671-D SRM; NOT reproducible at desk scale):\n";
  const int w0 = 22, w = 10;
  for (const auto& r : rows) {
    os << std::left << std::setw(w0) << r.feature;
    for (const auto& c : cols) os << std::right << std::setw(w) << c;
    os << '\n' << std::left << std::setw(w0) << "  normal images";
    for (const double v : r.normal) os << std::right << std::setw(w) << fmt("%.4f", v);
    os << '\n' << std::left << std::setw(w0) << "  adversarial images";
    for (const double v : r.adversarial) os << std::right << std::setw(w) << fmt("%.4f", v);
    os << '\n';
  }
}

void atomic_write(const fs::path& file, const std::function<void(const fs::path&)>& writer) {
  const fs::path tmp = file.string() + ".partial";
  writer(tmp);
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw Error("cannot move " + tmp.string() + " into place: " + ec.message());
}

// ------------------------------------------------------------ experiment --

namespace {

std::string stage_digest(const std::string& stage, const json& inputs) {
  return sha256_hex(json{{"stage", stage}, {"inputs", inputs}}.dump());
}

std::string short_digest(const std::string& d) { return d.substr(0, 16); }

template <typename Fn>
auto run_stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw Error("stage " + name + " failed: " + e.what());
  }
}

void write_text(const fs::path& file, const std::string& text) {
  atomic_write(file, [&](const fs::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write " + tmp.string());
    os << text;
    if (!os) throw Error("failed writing " + tmp.string());
  });
}

std::string read_text(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot read " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Train split followed by test split; validation images are not used.
struct WorkSet {
  std::vector<std::size_t> manifest_index;
  std::vector<GrayImage> images;
  std::vector<int> labels;
  std::size_t n_train = 0;
};

struct Logger {
  std::ostream* os;
  template <typename... Args>
  void operator()(const Args&... args) const {
    if (!os) return;
    ((*os) << ... << args) << std::endl;
  }
};

// Adversarial images for the work set, cached as PGMs plus the results CSV.
std::vector<AttackResult> cached_attacks(const fs::path& dir, const WorkSet& work,
                                         const DatasetManifest& manifest, const VictimModel& model,
                                         AttackKind kind, const AttackConfig& acfg, int jobs,
                                         const Logger& log) {
  const std::string tag = attack_tag(kind, acfg);
  const fs::path done = dir / "complete";
  std::vector<AttackResult> results(work.images.size());
  if (fs::exists(done)) {
    log("  cached ", tag, " (", dir.filename().string(), ")");
    std::ifstream is(dir / "results.csv");
    std::string line;
    std::getline(is, line);  // header
    for (std::size_t i = 0; i < results.size(); ++i) {
      if (!std::getline(is, line)) throw Error("truncated attack results in " + dir.string());
      std::stringstream ss(line);
      std::string path, success, linf, l2, iters;
      std::getline(ss, path, ',');
      std::getline(ss, success, ',');
      std::getline(ss, linf, ',');
      std::getline(ss, l2, ',');
      std::getline(ss, iters, ',');
      auto& r = results[i];
      r.adversarial = load_image(dir / adversarial_name(path, tag));
      r.success = success == "1";
      r.linf = std::stod(linf);
      r.l2 = std::stod(l2);
      r.iterations = std::stoi(iters);
    }
    return results;
  }
  log("  attacking ", work.images.size(), " images with ", tag);
  fs::create_directories(dir);
  results = attack_batch(kind, model, work.images, work.labels, acfg, jobs);
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& path = manifest.entries[work.manifest_index[i]].path;
    paths.push_back(path);
    save_image(results[i].adversarial, dir / adversarial_name(path, tag));
  }
  std::ostringstream csv;
  write_attack_csv(paths, results, csv);
  write_text(dir / "results.csv", csv.str());
  write_text(done, tag + "\n");
  return results;
}

FeatureStore cached_features(const fs::path& file, const std::function<FeatureStore()>& compute,
                             const Logger& log) {
  if (fs::exists(file)) {
    log("  cached ", file.filename().string());
    return load_feature_store(file);
  }
  FeatureStore store = compute();
  atomic_write(file, [&](const fs::path& tmp) { save_feature_store(store, tmp); });
  log("  wrote ", file.filename().string());
  return store;
}

FeatureStore select_rows(const FeatureStore& s, const std::vector<std::size_t>& rows) {
  FeatureStore out;
  out.descriptor = s.descriptor;
  out.rows.resize(static_cast<Eigen::Index>(rows.size()), s.dimension());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.rows.row(static_cast<Eigen::Index>(k)) = s.rows.row(static_cast<Eigen::Index>(rows[k]));
  }
  return out;
}

double accuracy_on(const VictimModel& model, const WorkSet& w, std::size_t begin, std::size_t end) {
  if (end <= begin) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = begin; i < end; ++i) ok += predict_class(model, w.images[i]) == w.labels[i];
  return static_cast<double>(ok) / static_cast<double>(end - begin);
}

json mpm_inputs(const ExperimentConfig& cfg, const std::string& victim_digest) {
  json j{{"estimator", to_string(cfg.attack)}, {"L", cfg.effective_L()}, {"victim", victim_digest}};
  if (cfg.attack == AttackKind::deepfool) {
    j["max_iters"] = cfg.max_iters;
    j["overshoot"] = cfg.overshoot;
  } else if (cfg.attack == AttackKind::cw) {
    j["kappa"] = cfg.kappa;
    j["c_grid"] = cfg.c_grid;
    j["cw_steps"] = cfg.cw_steps;
    j["cw_learning_rate"] = cfg.cw_learning_rate;
  }
  return j;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir, int jobs,
                                std::ostream* log_stream) {
  cfg.validate();
  const Logger log{log_stream};
  ExperimentResult result;
  result.digest = cache_digest(cfg);
  const fs::path cache = out_dir / "cache";
  fs::create_directories(cache);
  {
    json c = cfg.to_json();
    c["digest"] = result.digest;
    write_text(out_dir / "config.json", c.dump(2) + "\n");
  }
  log("experiment ", short_digest(result.digest), " -> ", out_dir.string());

  // Corpus.
  json corpus_in = cfg.to_json()["corpus"];
  corpus_in["seed"] = cfg.seed;
  const std::string corpus_digest = stage_digest("corpus", corpus_in);
  const fs::path corpus_dir = cache / ("corpus-" + short_digest(corpus_digest));
  const DatasetManifest manifest = run_stage("corpus", [&] {
    if (fs::exists(corpus_dir / "manifest.json")) {
      log("corpus: cached ", corpus_dir.filename().string());
      return load_manifest(corpus_dir / "manifest.json");
    }
    log("corpus: generating ", cfg.n_images, " images");
    const fs::path tmp = corpus_dir.string() + ".partial";
    fs::remove_all(tmp);
    gen_synthetic_corpus(cfg.corpus_params(), tmp, jobs);
    fs::rename(tmp, corpus_dir);
    return load_manifest(corpus_dir / "manifest.json");
  });

  WorkSet work = run_stage("corpus", [&] {
    WorkSet w;
    const auto train = manifest.indices(Role::train);
    const auto test = manifest.indices(Role::test);
    std::set<std::string> train_paths;
    for (const auto i : train) train_paths.insert(manifest.entries[i].path);
    for (const auto i : test) {
      if (train_paths.count(manifest.entries[i].path)) throw Error("train and test splits overlap");
    }
    w.manifest_index = train;
    w.manifest_index.insert(w.manifest_index.end(), test.begin(), test.end());
    w.n_train = train.size();
    w.images.resize(w.manifest_index.size());
    w.labels.resize(w.manifest_index.size());
    parallel_for(w.images.size(), jobs, [&](std::size_t k) {
      const auto& e = manifest.entries[w.manifest_index[k]];
      w.images[k] = load_image(manifest.resolve(e));
      w.labels[k] = e.label;
    });
    return w;
  });
  const std::size_t n_work = work.images.size();

  // Victim.
  const json victim_in{{"corpus", corpus_digest}, {"train", cfg.to_json()["victim"]}, {"seed", cfg.seed}};
  const std::string victim_digest = stage_digest("victim", victim_in);
  const fs::path victim_file = cache / ("victim-" + short_digest(victim_digest) + ".bin");
  const VictimModel victim = run_stage("victim", [&] {
    if (fs::exists(victim_file)) {
      log("victim: cached ", victim_file.filename().string());
      return load_victim(victim_file);
    }
    log("victim: training on ", work.n_train, " images");
    std::vector<GrayImage> imgs(work.images.begin(), work.images.begin() + static_cast<long>(work.n_train));
    std::vector<int> labs(work.labels.begin(), work.labels.begin() + static_cast<long>(work.n_train));
    const auto trained = train_victim(imgs, labs, cfg.n_classes, cfg.train_config());
    atomic_write(victim_file, [&](const fs::path& tmp) { save_victim(trained.model, tmp); });
    std::ostringstream curve;
    curve << "epoch,loss\n";
    for (std::size_t e = 0; e < trained.epoch_loss.size(); ++e) {
      curve << e + 1 << ',' << fmt("%.10f", trained.epoch_loss[e]) << '\n';
    }
    write_text(cache / ("victim-" + short_digest(victim_digest) + "-loss.csv"), curve.str());
    return trained.model;
  });
  result.victim_train_accuracy = accuracy_on(victim, work, 0, work.n_train);
  result.victim_test_accuracy = accuracy_on(victim, work, work.n_train, n_work);
  log("victim: train accuracy ", fmt("%.4f", result.victim_train_accuracy), ", test accuracy ",
      fmt("%.4f", result.victim_test_accuracy));

  // Normal-image features, shared across settings.
  const std::uint64_t mpm_seed = mix_seed(cfg.seed, 7);
  const json mpm_in = mpm_inputs(cfg, victim_digest);
  auto feature_inputs = [&](FeatureKind kind) {
    json j{{"kind", to_string(kind)}};
    if (kind == FeatureKind::spam || kind == FeatureKind::espam) {
      j["T"] = cfg.spam_T;
      j["order"] = cfg.spam_order;
    } else {
      j["T"] = cfg.srm_T;
      j["bank"] = cfg.rich_config().descriptor(false);
    }
    if (is_enhanced(kind)) j["mpm"] = mpm_in;
    j["seed"] = cfg.seed;
    return j;
  };
  auto mpm_source = [&](const std::vector<GrayImage>& images) -> MpmSource {
    return [&, images_ptr = &images](std::size_t i) {
      const std::uint64_t s = mix_seed(mpm_seed, work.manifest_index[i]);
      return estimate_mpm(cfg.attack, victim, (*images_ptr)[i], cfg, s, 1);
    };
  };

  std::map<FeatureKind, std::pair<std::string, FeatureStore>> normal_features;
  for (const auto kind : cfg.features) {
    const std::string d = stage_digest("features", {{"images", corpus_digest}, {"set", "normal"},
                                                    {"feature", feature_inputs(kind)}});
    const fs::path file = cache / ("feat-" + to_string(kind) + "-normal-" + short_digest(d) + ".feat");
    auto store = run_stage("features", [&] {
      log("features: ", to_string(kind), " on normal images");
      return cached_features(
          file, [&] { return extract_features(kind, cfg, work.images, mpm_source(work.images), jobs); },
          log);
    });
    normal_features.emplace(kind, std::make_pair(d, std::move(store)));
  }

  for (const auto& setting : cfg.settings()) {
    const AttackConfig acfg = cfg.attack_config(setting.value_or(1.0));
    const std::string tag = attack_tag(cfg.attack, acfg);
    const json attack_in{{"victim", victim_digest}, {"corpus", corpus_digest}, {"tag", tag},
                         {"attack", cfg.to_json()["attack"]}, {"epsilon", acfg.epsilon}};
    const std::string attack_digest = stage_digest("attack", attack_in);
    const fs::path adv_dir = cache / ("adv-" + tag + "-" + short_digest(attack_digest));
    log("attack: ", tag);
    const auto attacked = run_stage("attack " + tag, [&] {
      return cached_attacks(adv_dir, work, manifest, victim, cfg.attack, acfg, jobs, log);
    });
    std::vector<GrayImage> adv_images(n_work);
    AttackSummary summary;
    summary.tag = tag;
    summary.attacked = n_work;
    std::vector<std::size_t> train_pairs, test_pairs;
    for (std::size_t i = 0; i < n_work; ++i) {
      adv_images[i] = attacked[i].adversarial;
      summary.succeeded += attacked[i].success;
      const bool modified = !(attacked[i].adversarial == work.images[i]);
      summary.modified += modified;
      if (modified) (i < work.n_train ? train_pairs : test_pairs).push_back(i);
    }
    result.attacks.push_back(summary);
    log("  success ", summary.succeeded, "/", n_work, ", modified ", summary.modified);

    for (const auto kind : cfg.features) {
      const auto& [normal_digest, normal_store] = normal_features.at(kind);
      const std::string adv_digest = stage_digest(
          "features", {{"images", attack_digest}, {"set", "adversarial"}, {"feature", feature_inputs(kind)}});
      const fs::path adv_file =
          cache / ("feat-" + to_string(kind) + "-" + tag + "-" + short_digest(adv_digest) + ".feat");
      const FeatureStore adv_store = run_stage("features", [&] {
        log("features: ", to_string(kind), " on ", tag);
        return cached_features(
            adv_file, [&] { return extract_features(kind, cfg, adv_images, mpm_source(adv_images), jobs); },
            log);
      });

      const std::string label = to_string(kind) + " / " + tag;
      DetectionReport report = run_stage("detector " + label, [&] {
        if (train_pairs.size() < 20 || test_pairs.empty()) {
          throw Error("too few modified images (train " + std::to_string(train_pairs.size()) + ", test " +
                      std::to_string(test_pairs.size()) + ")");
        }
        const auto [train_x, train_y] =
            stack_labelled(select_rows(normal_store, train_pairs), select_rows(adv_store, train_pairs));
        const std::string det_digest = stage_digest(
            "detector", {{"normal", normal_digest}, {"adversarial", adv_digest},
                         {"detector", cfg.to_json()["detector"]}, {"seed", cfg.seed}});
        const fs::path det_file = cache / ("det-" + to_string(kind) + "-" + tag + "-" +
                                           short_digest(det_digest) + ".ens");
        const fs::path meta_file = det_file.string() + ".json";
        EnsembleModel model;
        double oob = 0.0;
        if (fs::exists(det_file) && fs::exists(meta_file)) {
          log("  cached ", det_file.filename().string());
          model = load_ensemble(det_file);
          oob = json::parse(read_text(meta_file)).at("oob_error").get<double>();
        } else {
          log("detector: ", label, " on ", train_x.size(), " rows of ", train_x.dimension(), " features");
          const auto trained = ensemble_train(train_x.rows, train_y, mix_seed(cfg.seed, 11),
                                              cfg.ensemble_params(jobs), train_x.descriptor);
          model = trained.model;
          oob = trained.oob_error;
          std::ostringstream curve;
          curve << "d_sub,learners,oob_error\n";
          for (const auto& p : trained.curve) curve << p.d_sub << ',' << p.learners << ',' << fmt("%.6f", p.error) << '\n';
          write_text(det_file.string() + "-oob.csv", curve.str());
          write_text(meta_file, json{{"oob_error", oob}}.dump() + "\n");
          atomic_write(det_file, [&](const fs::path& tmp) { save_ensemble(model, tmp); });
        }
        DetectionReport r =
            evaluate(model, select_rows(normal_store, test_pairs), select_rows(adv_store, test_pairs));
        r.attack = tag;
        r.epsilon = setting;
        r.oob_error = oob;
        r.train_pairs = train_pairs.size();
        return r;
      });
      log("  ", label, ": normal ", fmt("%.4f", report.normal_accuracy), ", adversarial ",
          fmt("%.4f", report.adversarial_accuracy), ", average ", fmt("%.4f", report.average_accuracy),
          ", oob ", fmt("%.4f", report.oob_error));
      result.reports.push_back(std::move(report));
    }
  }

  run_stage("report", [&] {
    std::ostringstream csv;
    write_report_csv(result.reports, csv);
    write_text(out_dir / "report.csv", csv.str());

    std::ostringstream txt;
    txt << "experiment " << result.digest << "\n";
    txt << "victim accuracy: train " << fmt("%.4f", result.victim_train_accuracy) << ", test "
        << fmt("%.4f", result.victim_test_accuracy) << "\n";
    for (const auto& a : result.attacks) {
      txt << "attack " << a.tag << ": success " << a.succeeded << "/" << a.attacked << ", modified "
          << a.modified << "\n";
    }
    txt << "\nDetection accuracy on the test split (desk scale):\n";
    write_report_table(result.reports, txt);
    txt << "\n";
    write_reference_table(cfg.attack, txt);
    write_text(out_dir / "report.txt", txt.str());
    return 0;
  });
  return result;
}

}  // namespace stegdet
