// Command-line front end: one subcommand per pipeline stage plus `reproduce`.
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "stegdet/pipeline.hpp"
#include "stegdet/toml_lite.hpp"

namespace fs = std::filesystem;
using namespace stegdet;

namespace {

// Options shared by every subcommand.
struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  int jobs = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "TOML experiment configuration")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Override a config key, e.g. --set attack.kind=\"igsm\"");
  app->add_option("--seed", c.seed, "Master seed");
  app->add_option("--out-dir", c.out_dir, "Output directory")->capture_default_str();
  app->add_option("--jobs", c.jobs, "Worker threads (results do not depend on it)")
      ->check(CLI::Range(1, 1024))
      ->capture_default_str();
}

// File config, then --set overrides, then dedicated flags.
ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config.empty()) cfg.merge_json(load_toml(c.config));
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const auto dot = key.find('.');
    std::string toml = dot == std::string::npos
                           ? key + " = " + kv.substr(eq + 1) + "\n"
                           : "[" + key.substr(0, dot) + "]\n" + key.substr(dot + 1) + " = " +
                                 kv.substr(eq + 1) + "\n";
    cfg.merge_json(parse_toml(toml));
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void write_file(const fs::path& p, const std::string& text) {
  atomic_write(p, [&](const fs::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    os << text;
    if (!os) throw Error("cannot write " + tmp.string());
  });
}

// A list of images: a manifest (optionally one role), a .txt list of paths
// relative to the list, a directory of PGMs in name order, or one image.
struct ImageList {
  std::vector<std::string> names;
  std::vector<fs::path> paths;
  std::vector<int> labels;  // -1 when unknown
};

ImageList list_images(const fs::path& src, const std::string& role) {
  ImageList out;
  if (fs::is_directory(src)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(src)) {
      if (e.is_regular_file() && (e.path().extension() == ".pgm" || e.path().extension() == ".ppm")) {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      out.names.push_back(f.filename().string());
      out.paths.push_back(f);
      out.labels.push_back(-1);
    }
  } else if (src.extension() == ".json") {
    const auto m = load_manifest(src);
    std::vector<std::size_t> idx;
    if (role.empty() || role == "all") {
      for (std::size_t i = 0; i < m.entries.size(); ++i) idx.push_back(i);
    } else {
      idx = m.indices(role_from_string(role));
    }
    for (const auto i : idx) {
      out.names.push_back(m.entries[i].path);
      out.paths.push_back(m.resolve(m.entries[i]));
      out.labels.push_back(m.entries[i].label);
    }
  } else if (src.extension() == ".txt") {
    std::ifstream is(src);
    if (!is) throw Error("cannot read " + src.string());
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      out.names.push_back(line);
      out.paths.push_back(src.parent_path() / line);
      out.labels.push_back(-1);
    }
  } else {
    out.names.push_back(src.filename().string());
    out.paths.push_back(src);
    out.labels.push_back(-1);
  }
  if (out.paths.empty()) throw Error("no images found in " + src.string());
  return out;
}

std::vector<GrayImage> load_all(const ImageList& list, int jobs) {
  std::vector<GrayImage> images(list.paths.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) { images[i] = load_image(list.paths[i]); });
  return images;
}

// Unknown labels fall back to the victim's prediction.
std::vector<int> labels_for(const ImageList& list, const std::vector<GrayImage>& images,
                            const VictimModel& model) {
  std::vector<int> labels(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    labels[i] = list.labels[i] >= 0 ? list.labels[i] : predict_class(model, images[i]);
  }
  return labels;
}

void print_report(const DetectionReport& r) {
  std::cout << r.feature << ": normal " << r.normal_accuracy << ", adversarial " << r.adversarial_accuracy
            << ", average " << r.average_accuracy << " (tn " << r.counts.tn << ", fp " << r.counts.fp
            << ", fn " << r.counts.fn << ", tp " << r.counts.tp << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial example detection with steganalysis features"};
  app.require_subcommand(1);

  // gen-corpus
  Common gc;
  std::optional<std::size_t> gc_n;
  std::optional<int> gc_size, gc_classes;
  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic image corpus and manifest");
  add_common(gen, gc);
  gen->add_option("--n-images", gc_n, "Number of images");
  gen->add_option("--size", gc_size, "Image side in pixels");
  gen->add_option("--n-classes", gc_classes, "Number of classes");

  // train-victim
  Common tv;
  std::string tv_manifest;
  auto* train = app.add_subcommand("train-victim", "Train the victim classifier on the train split");
  add_common(train, tv);
  train->add_option("--manifest", tv_manifest, "Corpus manifest.json")->required()->check(CLI::ExistingFile);

  // attack
  Common at;
  std::string at_victim, at_images, at_role = "test", at_kind;
  std::optional<double> at_eps;
  auto* attack = app.add_subcommand("attack", "Run an untargeted attack over a batch of images");
  add_common(attack, at);
  attack->add_option("--victim", at_victim, "Victim model file")->required()->check(CLI::ExistingFile);
  attack->add_option("--images", at_images, "Manifest, image list, directory or single image")
      ->required()
      ->check(CLI::ExistingPath);
  attack->add_option("--role", at_role, "Manifest role to attack (train, val, test, all)")->capture_default_str();
  attack->add_option("--attack", at_kind, "fgsm, igsm, deepfool or cw");
  attack->add_option("--epsilon", at_eps, "Perturbation budget in pixel levels");

  // mpm
  Common mp;
  std::string mp_victim, mp_images, mp_role = "test", mp_kind;
  auto* mpm = app.add_subcommand("mpm", "Estimate modification probability maps");
  add_common(mpm, mp);
  mpm->add_option("--victim", mp_victim, "Victim model file")->required()->check(CLI::ExistingFile);
  mpm->add_option("--images", mp_images, "Manifest, image list, directory or single image")
      ->required()
      ->check(CLI::ExistingPath);
  mpm->add_option("--role", mp_role, "Manifest role")->capture_default_str();
  mpm->add_option("--attack", mp_kind, "Estimator to use: fgsm, igsm, deepfool or cw");

  // extract
  Common ex;
  std::string ex_images, ex_role = "all", ex_feature, ex_victim, ex_kind, ex_name;
  bool ex_csv = false;
  auto* extract = app.add_subcommand("extract", "Extract one feature set from a batch of images");
  add_common(extract, ex);
  extract->add_option("--images", ex_images, "Manifest, image list, directory or single image")
      ->required()
      ->check(CLI::ExistingPath);
  extract->add_option("--role", ex_role, "Manifest role")->capture_default_str();
  extract->add_option("--feature", ex_feature, "spam, espam, srmlite or esrm")->required();
  extract->add_option("--victim", ex_victim, "Victim model (needed for espam and esrm)");
  extract->add_option("--attack", ex_kind, "MPM estimator for the enhanced features");
  extract->add_option("--name", ex_name, "Output stem (default: the feature name)");
  extract->add_flag("--csv", ex_csv, "Also export the rows as CSV");

  // train-detector
  Common td;
  std::string td_normal, td_adv, td_name = "detector";
  auto* det = app.add_subcommand("train-detector", "Train an FLD ensemble on normal vs adversarial features");
  add_common(det, td);
  det->add_option("--normal", td_normal, "Normal feature store")->required()->check(CLI::ExistingFile);
  det->add_option("--adversarial", td_adv, "Adversarial feature store")->required()->check(CLI::ExistingFile);
  det->add_option("--name", td_name, "Output stem")->capture_default_str();

  // evaluate
  Common ev;
  std::vector<std::string> ev_detectors, ev_features;
  std::string ev_normal, ev_adv;
  auto* eval = app.add_subcommand("evaluate", "Apply detectors to feature stores");
  add_common(eval, ev);
  eval->add_option("--detector", ev_detectors, "Detector file; repeat with --features for a detector bank")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--normal", ev_normal, "Normal feature store")->check(CLI::ExistingFile);
  eval->add_option("--adversarial", ev_adv, "Adversarial feature store")->check(CLI::ExistingFile);
  eval->add_option("--features", ev_features, "Bank mode: one feature store per detector, same images")
      ->check(CLI::ExistingFile);

  // reproduce
  Common rp;
  std::optional<std::string> rp_attack;
  auto* repro = app.add_subcommand("reproduce", "Run the full experiment and print the accuracy table");
  add_common(repro, rp);
  repro->add_option("--attack", rp_attack, "Override attack.kind");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto cfg = load_config(gc);
      if (gc_n) cfg.n_images = *gc_n;
      if (gc_size) cfg.image_size = *gc_size;
      if (gc_classes) cfg.n_classes = *gc_classes;
      cfg.validate();
      const auto m = gen_synthetic_corpus(cfg.corpus_params(), gc.out_dir, gc.jobs);
      std::cout << "wrote " << m.entries.size() << " images and manifest.json to " << gc.out_dir << "\n";
    } else if (train->parsed()) {
      const auto cfg = load_config(tv);
      const auto m = load_manifest(tv_manifest);
      const auto trained = train_victim(m, cfg.train_config());
      fs::create_directories(tv.out_dir);
      save_victim(trained.model, fs::path(tv.out_dir) / "victim.bin");
      std::ostringstream curve;
      curve << "epoch,loss\n";
      for (std::size_t e = 0; e < trained.epoch_loss.size(); ++e) curve << e + 1 << ',' << trained.epoch_loss[e] << '\n';
      write_file(fs::path(tv.out_dir) / "victim-loss.csv", curve.str());
      std::size_t ok = 0;
      const auto test = m.indices(Role::test);
      for (const auto i : test) ok += predict_class(trained.model, load_image(m.resolve(m.entries[i]))) == m.entries[i].label;
      std::cout << "train accuracy " << trained.train_accuracy << ", test accuracy "
                << (test.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(test.size())) << "\n"
                << "wrote " << (fs::path(tv.out_dir) / "victim.bin").string() << "\n";
    } else if (attack->parsed()) {
      auto cfg = load_config(at);
      if (!at_kind.empty()) cfg.attack = attack_from_string(at_kind);
      const double eps = at_eps.value_or(cfg.epsilons.empty() ? 8.0 : cfg.epsilons.back());
      const AttackConfig acfg = cfg.attack_config(eps);
      acfg.validate();
      const auto model = load_victim(at_victim);
      const auto list = list_images(at_images, at_role);
      const auto images = load_all(list, at.jobs);
      const auto labels = labels_for(list, images, model);
      const auto results = attack_batch(cfg.attack, model, images, labels, acfg, at.jobs);
      const fs::path out(at.out_dir);
      fs::create_directories(out);
      const std::string tag = attack_tag(cfg.attack, acfg);
      std::ostringstream listing;
      std::size_t ok = 0;
      for (std::size_t i = 0; i < results.size(); ++i) {
        const auto name = adversarial_name(list.names[i], tag);
        save_image(results[i].adversarial, out / name);
        listing << name << '\n';
        ok += results[i].success;
      }
      std::ostringstream csv;
      write_attack_csv(list.names, results, csv);
      write_file(out / ("results-" + tag + ".csv"), csv.str());
      write_file(out / ("adversarial-" + tag + ".txt"), listing.str());
      std::cout << tag << ": success " << ok << "/" << results.size() << ", images in " << out.string() << "\n";
    } else if (mpm->parsed()) {
      auto cfg = load_config(mp);
      if (!mp_kind.empty()) cfg.attack = attack_from_string(mp_kind);
      const auto model = load_victim(mp_victim);
      cfg.n_classes = model.n_classes;
      const auto list = list_images(mp_images, mp_role);
      const auto images = load_all(list, mp.jobs);
      std::vector<ProbMap> maps(images.size());
      const std::uint64_t base = mix_seed(cfg.seed, 7);
      parallel_for(images.size(), mp.jobs, [&](std::size_t i) {
        maps[i] = estimate_mpm(cfg.attack, model, images[i], cfg, mix_seed(base, i), 1);
      });
      const fs::path out(mp.out_dir);
      fs::create_directories(out);
      for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto stem = fs::path(list.names[i]).stem().string();
        save_probmap(maps[i], out / (stem + ".mpm.pf1"));
        save_image(probmap_visualization(maps[i]), out / (stem + ".mpm.pgm"));
      }
      std::cout << "wrote " << maps.size() << " probability maps to " << out.string() << "\n";
    } else if (extract->parsed()) {
      auto cfg = load_config(ex);
      if (!ex_kind.empty()) cfg.attack = attack_from_string(ex_kind);
      const auto kind = feature_from_string(ex_feature);
      const auto list = list_images(ex_images, ex_role);
      const auto images = load_all(list, ex.jobs);
      std::optional<VictimModel> model;
      MpmSource source;
      if (is_enhanced(kind)) {
        if (ex_victim.empty()) throw Error(ex_feature + " needs --victim for its probability maps");
        model = load_victim(ex_victim);
        cfg.n_classes = model->n_classes;
        const std::uint64_t base = mix_seed(cfg.seed, 7);
        source = [&](std::size_t i) { return estimate_mpm(cfg.attack, *model, images[i], cfg, mix_seed(base, i), 1); };
      }
      const auto store = extract_features(kind, cfg, images, source, ex.jobs);
      const fs::path out(ex.out_dir);
      fs::create_directories(out);
      const std::string stem = ex_name.empty() ? ex_feature : ex_name;
      atomic_write(out / (stem + ".feat"), [&](const fs::path& tmp) { save_feature_store(store, tmp); });
      if (ex_csv) export_feature_csv(store, out / (stem + ".csv"));
      std::cout << store.descriptor << ": " << store.size() << " x " << store.dimension() << " -> "
                << (out / (stem + ".feat")).string() << "\n";
    } else if (det->parsed()) {
      const auto cfg = load_config(td);
      const auto [x, y] = stack_labelled(load_feature_store(td_normal), load_feature_store(td_adv));
      const auto trained = ensemble_train(x.rows, y, mix_seed(cfg.seed, 11), cfg.ensemble_params(td.jobs), x.descriptor);
      const fs::path out(td.out_dir);
      fs::create_directories(out);
      atomic_write(out / (td_name + ".ens"), [&](const fs::path& tmp) { save_ensemble(trained.model, tmp); });
      std::ostringstream curve;
      curve << "d_sub,L,oob_error\n";
      for (const auto& p : trained.curve) curve << p.d_sub << ',' << p.learners << ',' << p.error << '\n';
      write_file(out / (td_name + "-oob.csv"), curve.str());
      std::cout << curve.str() << "selected d_sub " << trained.model.d_sub << ", L " << trained.model.size()
                << ", oob error " << trained.oob_error << "\n";
    } else if (eval->parsed()) {
      const fs::path out(ev.out_dir);
      fs::create_directories(out);
      if (!ev_features.empty()) {
        std::vector<EnsembleModel> bank;
        std::vector<FeatureStore> rows;
        for (const auto& d : ev_detectors) bank.push_back(load_ensemble(d));
        for (const auto& f : ev_features) rows.push_back(load_feature_store(f));
        const auto flagged = detector_bank(bank, rows);
        std::ostringstream csv;
        csv << "row,flagged\n";
        std::size_t n = 0;
        for (std::size_t i = 0; i < flagged.size(); ++i) {
          csv << i << ',' << (flagged[i] ? 1 : 0) << '\n';
          n += flagged[i];
        }
        write_file(out / "bank.csv", csv.str());
        std::cout << "detector bank flagged " << n << "/" << flagged.size() << " rows\n";
      } else {
        if (ev_normal.empty() || ev_adv.empty()) throw Error("evaluate needs --normal and --adversarial");
        const auto normal = load_feature_store(ev_normal);
        const auto adv = load_feature_store(ev_adv);
        std::vector<DetectionReport> reports;
        for (const auto& d : ev_detectors) {
          auto r = evaluate(load_ensemble(d), normal, adv);
          r.attack = fs::path(d).stem().string();
          print_report(r);
          reports.push_back(std::move(r));
        }
        std::ostringstream csv;
        write_report_csv(reports, csv);
        write_file(out / "evaluation.csv", csv.str());
      }
    } else if (repro->parsed()) {
      auto cfg = load_config(rp);
      if (rp_attack) cfg.attack = attack_from_string(*rp_attack);
      const auto result = run_experiment(cfg, rp.out_dir, rp.jobs, &std::cerr);
      std::ifstream txt(fs::path(rp.out_dir) / "report.txt");
      std::cout << txt.rdbuf();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
