#include "nowcast/service.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <set>

#include "nowcast/grdf.hpp"
#include "nowcast/verif.hpp"

namespace nowcast {

namespace fs = std::filesystem;

namespace {

std::string now_iso() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text_file(p, j.dump(2) + "\n"); }
nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text_file(p)); }

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw InvalidSpec(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw InvalidSpec("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_as(const nlohmann::json& j, const char* key, const T& fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidSpec("wrong type for '" + std::string(key) + "' in " + where);
  }
}

TrainConfig train_from_json(const nlohmann::json& j, const TrainConfig& fallback,
                            const std::string& where) {
  check_keys(j, {"learning_rate", "weight_decay", "epochs", "batch_size", "class_weights", "beta1",
                 "beta2", "epsilon", "seed", "optimizer"},
             where);
  TrainConfig c = fallback;
  c.learning_rate = get_as(j, "learning_rate", c.learning_rate, where);
  c.weight_decay = get_as(j, "weight_decay", c.weight_decay, where);
  c.epochs = get_as(j, "epochs", c.epochs, where);
  c.batch_size = get_as(j, "batch_size", c.batch_size, where);
  c.class_weights = get_as(j, "class_weights", c.class_weights, where);
  c.beta1 = get_as(j, "beta1", c.beta1, where);
  c.beta2 = get_as(j, "beta2", c.beta2, where);
  c.epsilon = get_as(j, "epsilon", c.epsilon, where);
  if (get_as<std::string>(j, "optimizer", "adam", where) != "adam") {
    throw InvalidSpec("only the adam optimizer is supported");
  }
  return c;
}

nlohmann::json train_to_json(const TrainConfig& c, std::uint64_t seed) {
  TrainConfig copy = c;
  copy.seed = seed;
  return copy.to_json();
}

}  // namespace

// ---------------------------------------------------------------- config

ServiceConfig::ServiceConfig() {
  segmentation.epochs = 80;
  classifier.epochs = 80;
}

void ServiceConfig::validate() const {
  int total = 0;
  for (int c : data.profile) {
    if (c < 0) throw InvalidSpec("type counts must be >= 0");
    total += c;
  }
  if (total == 0) throw InvalidSpec("data profile is empty");
  if (data.grid.height < 8 || data.grid.width < 8 || data.grid.height % 4 || data.grid.width % 4) {
    throw InvalidSpec("grid dims must be >= 8 and divisible by 4");
  }
  if (!(data.km_per_pixel > 0.0)) throw InvalidSpec("km_per_pixel must be > 0");
  double sum = 0.0;
  for (double r : data.split) {
    if (!(r >= 0.0)) throw InvalidSpec("split ratios must be >= 0");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidSpec("split ratios must sum to 1");
  if (arch.enc1 < 1 || arch.enc2 < 1 || arch.enc3 < 1) throw InvalidSpec("channel widths must be >= 1");
  if (calibration.ece_bins < 1 || calibration.binning_bins < 1) throw InvalidSpec("bin counts must be >= 1");
  if (calibration.sampling.repeats < 1 || calibration.sampling.length < 1) {
    throw InvalidSpec("sampling length and repeats must be >= 1");
  }
  for (const auto& m : explain.methods) method_from_name(m);
  if (explain.methods.empty()) throw InvalidSpec("explain.methods is empty");
  if (explain.lead_time < 1 || explain.lead_time > kNumLeadTimes) throw InvalidSpec("explain.lead_time must be in 1..6");
  if (explain.target_class < 0 || explain.target_class >= kNumClasses) throw InvalidSpec("explain.target_class must be in 0..2");
  if (explain.deletion_cases < 1 || explain.rf_cases < 1) throw InvalidSpec("case counts must be >= 1");
  if (explain.steps < 1 || explain.n_samples < 1 || explain.rf_steps < 1 || explain.rf_samples < 1) {
    throw InvalidSpec("steps and sample counts must be >= 1");
  }
  if (explain.noise_sigma && !(*explain.noise_sigma >= 0.0)) throw InvalidSpec("noise_sigma must be >= 0");
}

TrainConfig ServiceConfig::segmentation_train() const {
  TrainConfig c = segmentation;
  c.seed = splitmix64(seed ^ 0x5E6u);
  return c;
}

TrainConfig ServiceConfig::classifier_train() const {
  TrainConfig c = classifier;
  c.seed = splitmix64(seed ^ 0xC1Fu);
  return c;
}

LtsConfig ServiceConfig::lts() const {
  LtsConfig c = calibration.lts;
  c.seed = splitmix64(seed ^ 0x175u);
  return c;
}

std::uint64_t ServiceConfig::explain_seed() const { return splitmix64(seed ^ 0xE8Au); }

nlohmann::json ServiceConfig::to_json() const {
  nlohmann::json ex = {{"methods", explain.methods},
                       {"deletion_cases", explain.deletion_cases},
                       {"lead_time", explain.lead_time},
                       {"target_class", explain.target_class},
                       {"steps", explain.steps},
                       {"n_samples", explain.n_samples},
                       {"noise_sigma", explain.noise_sigma ? nlohmann::json(*explain.noise_sigma) : nlohmann::json(nullptr)},
                       {"ks", explain.ks},
                       {"rf_cases", explain.rf_cases},
                       {"rf_steps", explain.rf_steps},
                       {"rf_samples", explain.rf_samples}};
  auto lts_j = lts().to_json();
  return {{"format", "nowcast-xai-config/1"},
          {"seed", seed},
          {"data",
           {{"profile", data.profile},
            {"grid", {data.grid.height, data.grid.width}},
            {"km_per_pixel", data.km_per_pixel},
            {"split", data.split}}},
          {"model",
           {{"arch", {{"enc1", arch.enc1}, {"enc2", arch.enc2}, {"enc3", arch.enc3}}},
            {"train", train_to_json(segmentation, segmentation_train().seed)}}},
          {"classifier", {{"train", train_to_json(classifier, classifier_train().seed)}}},
          {"calibration",
           {{"ece_bins", calibration.ece_bins},
            {"binning_bins", calibration.binning_bins},
            {"sampling", {{"length", calibration.sampling.length}, {"repeats", calibration.sampling.repeats}}},
            {"lts", lts_j}}},
          {"explain", ex}};
}

ServiceConfig ServiceConfig::from_json(const nlohmann::json& j) {
  check_keys(j, {"format", "seed", "data", "model", "classifier", "calibration", "explain", "$schema"}, "config");
  ServiceConfig c;
  if (j.contains("format") && j.at("format") != "nowcast-xai-config/1") {
    throw InvalidSpec("unsupported config format");
  }
  c.seed = get_as(j, "seed", c.seed, "config");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"profile", "grid", "km_per_pixel", "split"}, "data");
    c.data.profile = get_as(d, "profile", c.data.profile, "data");
    const auto grid = get_as(d, "grid", std::array<int, 2>{c.data.grid.height, c.data.grid.width}, "data");
    c.data.grid = GridSize{grid[0], grid[1]};
    c.data.km_per_pixel = get_as(d, "km_per_pixel", c.data.km_per_pixel, "data");
    c.data.split = get_as(d, "split", c.data.split, "data");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"arch", "train"}, "model");
    if (m.contains("arch")) {
      const auto& a = m.at("arch");
      check_keys(a, {"enc1", "enc2", "enc3"}, "model.arch");
      c.arch.enc1 = get_as(a, "enc1", c.arch.enc1, "model.arch");
      c.arch.enc2 = get_as(a, "enc2", c.arch.enc2, "model.arch");
      c.arch.enc3 = get_as(a, "enc3", c.arch.enc3, "model.arch");
    }
    if (m.contains("train")) c.segmentation = train_from_json(m.at("train"), c.segmentation, "model.train");
  }
  if (j.contains("classifier")) {
    const auto& m = j.at("classifier");
    check_keys(m, {"train"}, "classifier");
    if (m.contains("train")) c.classifier = train_from_json(m.at("train"), c.classifier, "classifier.train");
  }
  if (j.contains("calibration")) {
    const auto& k = j.at("calibration");
    check_keys(k, {"ece_bins", "binning_bins", "sampling", "lts"}, "calibration");
    c.calibration.ece_bins = get_as(k, "ece_bins", c.calibration.ece_bins, "calibration");
    c.calibration.binning_bins = get_as(k, "binning_bins", c.calibration.binning_bins, "calibration");
    if (k.contains("sampling")) {
      const auto& s = k.at("sampling");
      check_keys(s, {"length", "repeats"}, "calibration.sampling");
      c.calibration.sampling.length = get_as(s, "length", c.calibration.sampling.length, "calibration.sampling");
      c.calibration.sampling.repeats = get_as(s, "repeats", c.calibration.sampling.repeats, "calibration.sampling");
    }
    if (k.contains("lts")) {
      const auto& l = k.at("lts");
      check_keys(l, {"hidden", "epochs", "batch_size", "learning_rate", "seed"}, "calibration.lts");
      auto& t = c.calibration.lts;
      t.hidden = get_as(l, "hidden", t.hidden, "calibration.lts");
      t.epochs = get_as(l, "epochs", t.epochs, "calibration.lts");
      t.batch_size = get_as(l, "batch_size", t.batch_size, "calibration.lts");
      t.learning_rate = get_as(l, "learning_rate", t.learning_rate, "calibration.lts");
    }
  }
  if (j.contains("explain")) {
    const auto& e = j.at("explain");
    const std::string w = "explain";
    check_keys(e, {"methods", "deletion_cases", "lead_time", "target_class", "steps", "n_samples",
                   "noise_sigma", "ks", "rf_cases", "rf_steps", "rf_samples"},
               w);
    auto& x = c.explain;
    x.methods = get_as(e, "methods", x.methods, w);
    x.deletion_cases = get_as(e, "deletion_cases", x.deletion_cases, w);
    x.lead_time = get_as(e, "lead_time", x.lead_time, w);
    x.target_class = get_as(e, "target_class", x.target_class, w);
    x.steps = get_as(e, "steps", x.steps, w);
    x.n_samples = get_as(e, "n_samples", x.n_samples, w);
    if (e.contains("noise_sigma")) {
      if (e.at("noise_sigma").is_null()) x.noise_sigma.reset();
      else x.noise_sigma = get_as(e, "noise_sigma", 0.0, w);
    }
    x.ks = get_as(e, "ks", x.ks, w);
    x.rf_cases = get_as(e, "rf_cases", x.rf_cases, w);
    x.rf_steps = get_as(e, "rf_steps", x.rf_steps, w);
    x.rf_samples = get_as(e, "rf_samples", x.rf_samples, w);
  }
  try {
    c.validate();
  } catch (const InvalidParameter& e) {
    throw InvalidSpec(e.what());
  }
  return c;
}

std::string ServiceConfig::run_id() const { return sha256_hex(to_json().dump()).substr(0, 16); }

// ---------------------------------------------------------------- records

std::string_view status_name(RunStatus s) {
  switch (s) {
    case RunStatus::Pending: return "Pending";
    case RunStatus::Running: return "Running";
    case RunStatus::Done: return "Done";
    case RunStatus::Failed: return "Failed";
  }
  return "?";
}

RunStatus status_from_name(std::string_view s) {
  for (auto v : {RunStatus::Pending, RunStatus::Running, RunStatus::Done, RunStatus::Failed}) {
    if (status_name(v) == s) return v;
  }
  throw InvalidInput("unknown run status: " + std::string(s));
}

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::GenData: return "gen-data";
    case Stage::Train: return "train";
    case Stage::Calibrate: return "calibrate";
    case Stage::Explain: return "explain";
    case Stage::Report: return "report";
  }
  return "?";
}

Stage stage_from_name(std::string_view s) {
  for (auto v : kStages) {
    if (stage_name(v) == s) return v;
  }
  throw InvalidParameter("unknown stage: " + std::string(s));
}

bool RunRecord::stage_done(Stage s) const {
  return std::find(completed_stages.begin(), completed_stages.end(), stage_name(s)) !=
         completed_stages.end();
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json arts = nlohmann::json::object();
  for (const auto& [k, v] : artifacts) arts[k] = {{"path", v.path}, {"sha256", v.sha256}};
  nlohmann::json j = {{"run_id", run_id},
                      {"status", status_name(status)},
                      {"completed_stages", completed_stages},
                      {"artifacts", arts},
                      {"created", created},
                      {"updated", updated},
                      {"config", config}};
  if (status == RunStatus::Failed) {
    j["failed_stage"] = failed_stage;
    j["error"] = error;
    j["error_kind"] = error_kind;
  }
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.status = status_from_name(j.at("status").get<std::string>());
  r.completed_stages = j.value("completed_stages", std::vector<std::string>{});
  for (const auto& [k, v] : j.at("artifacts").items()) {
    r.artifacts[k] = {v.at("path").get<std::string>(), v.at("sha256").get<std::string>()};
  }
  r.created = j.value("created", std::string{});
  r.updated = j.value("updated", std::string{});
  r.config = j.at("config");
  r.failed_stage = j.value("failed_stage", std::string{});
  r.error = j.value("error", std::string{});
  r.error_kind = j.value("error_kind", std::string{});
  return r;
}

RunStore::RunStore(fs::path root) : root_(std::move(root)) {}

fs::path RunStore::default_root() {
  if (const char* env = std::getenv("NOWCAST_XAI_HOME"); env && *env) return env;
  return fs::current_path() / "nowcast-xai-home";
}

fs::path RunStore::run_dir(const std::string& run_id) const { return root_ / "runs" / run_id; }

std::optional<RunRecord> RunStore::load(const std::string& run_id) const {
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id.find("..") != std::string::npos) {
    return std::nullopt;
  }
  const fs::path p = run_dir(run_id) / "run.json";
  if (!fs::exists(p)) return std::nullopt;
  return RunRecord::from_json(read_json(p));
}

void RunStore::save(const RunRecord& rec) const {
  const fs::path dir = run_dir(rec.run_id);
  const fs::path tmp = dir / "run.json.tmp";
  write_json(tmp, rec.to_json());
  fs::rename(tmp, dir / "run.json");
}

std::vector<RunRecord> RunStore::list() const {
  std::vector<RunRecord> out;
  const fs::path runs = root_ / "runs";
  if (!fs::exists(runs)) return out;
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(runs)) {
    if (e.is_directory()) ids.push_back(e.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  for (const auto& id : ids) {
    if (auto r = load(id)) out.push_back(std::move(*r));
  }
  return out;
}

RunRecord RunStore::create_or_load(const ServiceConfig& cfg) const {
  const std::string id = cfg.run_id();
  if (auto r = load(id)) return *r;
  RunRecord r;
  r.run_id = id;
  r.config = cfg.to_json();
  r.created = r.updated = now_iso();
  write_json(run_dir(id) / "config.json", r.config);
  save(r);
  return r;
}

void RunStore::register_artifact(RunRecord& rec, const std::string& name, const std::string& rel) const {
  rec.artifacts[name] = {rel, sha256_file(run_dir(rec.run_id) / rel)};
}

// ---------------------------------------------------------------- pipeline

namespace {

struct SplitIds {
  std::vector<std::string> train, val, test;
};

SplitIds read_split(const fs::path& dir) {
  const auto j = read_json(dir / "split.json");
  return {j.at("train").get<std::vector<std::string>>(), j.at("val").get<std::vector<std::string>>(),
          j.at("test").get<std::vector<std::string>>()};
}

ScenarioRefs refs_by_id(const std::vector<Scenario>& data, const std::vector<std::string>& ids) {
  std::map<std::string, const Scenario*> by_id;
  for (const auto& s : data) by_id[s.id] = &s;
  ScenarioRefs out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InvalidInput("scenario missing from dataset: " + id);
    out.push_back(it->second);
  }
  return out;
}

NetworkParams load_segmentation(const fs::path& dir) {
  auto l = load_network(dir / "models" / "segmentation");
  return NetworkParams{std::move(l.net), l.encoder_end};
}

ClassifierParams load_classifier(const fs::path& dir) {
  auto l = load_network(dir / "models" / "classifier");
  return ClassifierParams{std::move(l.net), l.encoder_end};
}

std::string lead_file(const std::string& stem, int lead, const std::string& ext) {
  return stem + "_lead" + std::to_string(lead) + ext;
}

/// Run-directory context shared by stages.
class StageRunner {
 public:
  StageRunner(const RunStore& store, RunRecord& rec, const ServiceConfig& cfg, const ProgressFn& progress)
      : store_(store), rec_(rec), cfg_(cfg), dir_(store.run_dir(rec.run_id)), progress_(progress) {}

  void run(Stage s) {
    switch (s) {
      case Stage::GenData: gen_data(); break;
      case Stage::Train: train(); break;
      case Stage::Calibrate: calibrate(); break;
      case Stage::Explain: explain(); break;
      case Stage::Report: report(); break;
    }
  }

 private:
  void note(const std::string& m) const {
    if (progress_) progress_(m);
  }
  void art(const std::string& name, const std::string& rel) { store_.register_artifact(rec_, name, rel); }

  const std::vector<Scenario>& dataset() {
    if (!data_loaded_) {
      data_ = read_dataset(dir_ / "data");
      data_loaded_ = true;
    }
    return data_;
  }

  void gen_data() {
    note("generating dataset");
    const auto data = make_dataset(cfg_.data.profile, cfg_.data_seed(), cfg_.data.grid, cfg_.data.km_per_pixel);
    write_dataset(dir_ / "data", data);
    const auto split = split_dataset(data, cfg_.data.split, cfg_.data_seed());
    auto ids = [&](const std::vector<std::size_t>& idx) {
      std::vector<std::string> out;
      for (auto i : idx) out.push_back(data[i].id);
      return out;
    };
    write_json(dir_ / "split.json", {{"train", ids(split.train)},
                                     {"val", ids(split.val)},
                                     {"test", ids(split.test)},
                                     {"warnings", split.warnings}});
    art("dataset.manifest", "data/manifest.json");
    art("split", "split.json");
  }

  void train() {
    const auto& data = dataset();
    const auto split = read_split(dir_);
    const auto train = refs_by_id(data, split.train);
    note("training segmentation network");
    auto seg = train_segmentation(train, cfg_.segmentation_train(), cfg_.arch);
    save_network(dir_ / "models" / "segmentation", seg.params.graph, seg.params.encoder_end, "segmentation");
    write_json(dir_ / "models" / "segmentation.log.json", seg.log.to_json());
    // downstream stages see exactly the persisted float32 weights
    const NetworkParams stored = load_segmentation(dir_);
    note("training rain-type classifier");
    auto clf = train_classifier(train, stored, cfg_.classifier_train());
    save_network(dir_ / "models" / "classifier", clf.params.graph, clf.params.encoder_end, "classifier");
    write_json(dir_ / "models" / "classifier.log.json", clf.log.to_json());
    for (const char* m : {"segmentation", "classifier"}) {
      const std::string s = m;
      art("weights." + s, "models/" + s + ".grdf");
      art("arch." + s, "models/" + s + ".arch.json");
      art("trainlog." + s, "models/" + s + ".log.json");
    }
  }

  void calibrate() {
    const auto& data = dataset();
    const auto split = read_split(dir_);
    const auto val = refs_by_id(data, split.val);
    const auto test = refs_by_id(data, split.test);
    if (val.empty() || test.empty()) throw EmptyDataset("calibration needs nonempty validation and test sets");
    const NetworkParams seg = load_segmentation(dir_);
    note("predicting validation and test sets");
    auto predict_all = [&](const ScenarioRefs& refs) {
      std::vector<std::vector<LogitGrid>> out;
      for (const Scenario* s : refs) out.push_back(predict(seg, s->inputs.channels));
      return out;
    };
    const auto val_logits = predict_all(val);
    const auto test_logits = predict_all(test);
    const int bins = cfg_.calibration.ece_bins;
    const std::vector<std::string> methods = {"temperature", "local_temperature", "platt", "histogram_binning"};

    EceReport report;
    report.bins = bins;
    report.methods = methods;
    nlohmann::json reliability = nlohmann::json::array();
    nlohmann::json f1s = nlohmann::json::array();
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
      note("calibrating lead time " + std::to_string(lead));
      auto samples = [&](const ScenarioRefs& refs, const std::vector<std::vector<LogitGrid>>& logits) {
        std::vector<CalibrationSample> out;
        for (std::size_t i = 0; i < refs.size(); ++i) {
          out.push_back({logits[i][lead - 1].z, refs[i]->truth_classes(lead), &refs[i]->mask,
                         &refs[i]->inputs.channels});
        }
        return out;
      };
      const auto vs = samples(val, val_logits);
      const auto ts = samples(test, test_logits);
      const PixelSet vpx = gather_pixels(vs);

      const TemperatureScalar T = fit_temperature(vpx, lead);
      const LocalTemperature lts = fit_local_temperature(vs, lead, cfg_.lts());
      const PlattParams platt = fit_platt(vpx, lead);
      std::vector<ProbGrid> vraw;
      for (const auto& s : vs) vraw.push_back(softmax(LogitGrid{s.logits, lead}));
      const ConfidencePixels vconf = confidence_pixels(vraw, vs);
      BinningTable binning = fit_histogram_binning(vconf.confidence, vconf.correct, cfg_.calibration.binning_bins);
      binning.lead_time = lead;

      write_json(dir_ / "calibration" / lead_file("temperature", lead, ".json"), T.to_json());
      save_local_temperature(dir_ / "calibration" / lead_file("local_temperature", lead, ""), lts);
      write_json(dir_ / "calibration" / lead_file("platt", lead, ".json"), platt.to_json());
      write_json(dir_ / "calibration" / lead_file("histogram_binning", lead, ".json"), binning.to_json());
      art(lead_file("calibrator.temperature", lead, ""), "calibration/" + lead_file("temperature", lead, ".json"));
      art(lead_file("calibrator.local_temperature", lead, ""), "calibration/" + lead_file("local_temperature", lead, ".grdf"));
      art(lead_file("calibrator.local_temperature.arch", lead, ""), "calibration/" + lead_file("local_temperature", lead, ".arch.json"));
      art(lead_file("calibrator.platt", lead, ""), "calibration/" + lead_file("platt", lead, ".json"));
      art(lead_file("calibrator.histogram_binning", lead, ""), "calibration/" + lead_file("histogram_binning", lead, ".json"));

      // held-out evaluation
      std::vector<ProbGrid> raw, p_ts, p_lts, p_platt;
      for (const auto& s : ts) {
        const LogitGrid z{s.logits, lead};
        raw.push_back(softmax(z));
        p_ts.push_back(apply_temperature(z, T).probs);
        p_lts.push_back(apply_local_temperature(lts, z, *s.input).probs);
        p_platt.push_back(apply_platt(z, platt).probs);
      }
      const ConfidencePixels c_raw = confidence_pixels(raw, ts);
      ConfidencePixels c_bin = c_raw;
      for (double& q : c_bin.confidence) q = binning.apply(q);
      const std::array<ConfidencePixels, 4> after = {confidence_pixels(p_ts, ts), confidence_pixels(p_lts, ts),
                                                     confidence_pixels(p_platt, ts), c_bin};
      SamplingProfile prof = cfg_.calibration.sampling;
      prof.seed = splitmix64(cfg_.seed ^ (0xECE0u + lead));
      prof.length = std::min(prof.length, c_raw.confidence.size());

      EceRow row;
      row.lead_time = lead;
      const auto rel_raw = reliability_diagram(c_raw.confidence, c_raw.correct, bins);
      row.before = ece_from_bins(rel_raw);
      row.sampled_before = ece_sampled(c_raw.confidence, c_raw.correct, bins, prof);
      nlohmann::json rel = {{"lead_time", lead}, {"none", rel_raw.to_json()}};
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const auto r = reliability_diagram(after[m].confidence, after[m].correct, bins);
        row.after.push_back(ece_from_bins(r));
        row.sampled_after.push_back(ece_sampled(after[m].confidence, after[m].correct, bins, prof));
        rel[methods[m]] = r.to_json();
      }
      report.rows.push_back(row);
      reliability.push_back(rel);

      auto pooled_f1 = [&](const std::vector<ProbGrid>& probs) {
        ConfusionPair cp;
        for (std::size_t i = 0; i < ts.size(); ++i) cp += confusions(argmax_class(probs[i]), ts[i].truth, *ts[i].mask);
        return metric_to_json(modified_f1(cp));
      };
      f1s.push_back({{"lead_time", lead},
                     {"none", pooled_f1(raw)},
                     {"temperature", pooled_f1(p_ts)},
                     {"local_temperature", pooled_f1(p_lts)},
                     {"platt", pooled_f1(p_platt)}});
    }
    write_text_file(dir_ / "calibration" / "ece.csv", report.to_csv());
    write_json(dir_ / "calibration" / "ece.json", report.to_json());
    write_json(dir_ / "calibration" / "reliability.json", {{"bins", bins}, {"leads", reliability}});
    write_json(dir_ / "calibration" / "f1.json", {{"leads", f1s}});
    art("report.ece.csv", "calibration/ece.csv");
    art("report.ece.json", "calibration/ece.json");
    art("report.reliability", "calibration/reliability.json");
    art("report.calibration_f1", "calibration/f1.json");
  }

  void explain() {
    const auto& data = dataset();
    const auto split = read_split(dir_);
    const auto test = refs_by_id(data, split.test);
    const NetworkParams seg = load_segmentation(dir_);
    const auto& ex = cfg_.explain;

    std::vector<DeletionCase> cases;
    std::vector<std::string> case_ids;
    for (const Scenario* s : test) {
      if (static_cast<int>(cases.size()) >= ex.deletion_cases) break;
      const ClassGrid truth = s->truth_classes(ex.lead_time);
      bool defined = false;
      deletion_score(seg.graph, s->inputs.channels, truth, s->mask, ex.lead_time, &defined);
      if (!defined) continue;
      cases.push_back({s->inputs.channels, truth, s->mask,
                       AttributionTarget::over_mask(ex.lead_time, ex.target_class, s->mask)});
      case_ids.push_back(s->id);
    }
    nlohmann::json deletion;
    if (cases.empty()) {
      deletion = {{"cases", nlohmann::json::array()}, {"ranking", nlohmann::json::array()},
                  {"note", "no test case has a defined score at the target lead time"}};
    } else {
      note("deletion benchmark on " + std::to_string(cases.size()) + " cases");
      std::vector<AttributionMethod> methods;
      for (const auto& m : ex.methods) methods.push_back(method_from_name(m));
      AttributionConfig ac;
      ac.steps = ex.steps;
      ac.n_samples = ex.n_samples;
      ac.noise_sigma = ex.noise_sigma.value_or(-1.0);
      ac.seed = cfg_.explain_seed();
      deletion = compare_methods(seg.graph, cases, methods, ex.ks, ac).to_json();
      deletion["cases"] = case_ids;
    }
    deletion["lead_time"] = ex.lead_time;
    deletion["target_class"] = ex.target_class;
    write_json(dir_ / "explain" / "deletion.json", deletion);
    art("report.deletion", "explain/deletion.json");

    note("receptive field estimate");
    std::vector<Tensor> rf_inputs;
    for (const Scenario* s : test) {
      if (static_cast<int>(rf_inputs.size()) >= ex.rf_cases) break;
      rf_inputs.push_back(s->inputs.channels);
    }
    if (rf_inputs.empty()) throw EmptyDataset("receptive field estimate needs test cases");
    AttributionConfig rc;
    rc.steps = ex.rf_steps;
    rc.n_samples = ex.rf_samples;
    rc.noise_sigma = ex.noise_sigma.value_or(-1.0);
    rc.seed = cfg_.explain_seed() ^ 0xF00Du;
    const auto rf = effective_receptive_field(seg.graph, rf_inputs, test.front()->mask, ex.lead_time,
                                              ex.target_class, rc);
    auto rfj = rf.to_json(cfg_.data.km_per_pixel);
    rfj["cases"] = rf_inputs.size();
    write_json(dir_ / "explain" / "receptive_field.json", rfj);
    write_grdf(dir_ / "explain" / "receptive_field_mass.grdf", tensor_to_grdf(rf.pixel_mass, "attribution_mass"));
    art("report.receptive_field", "explain/receptive_field.json");
    art("grid.receptive_field_mass", "explain/receptive_field_mass.grdf");
  }

  void report() {
    const auto& data = dataset();
    const auto split = read_split(dir_);
    const auto test = refs_by_id(data, split.test);
    if (test.empty()) throw EmptyDataset("report needs a nonempty test set");
    const NetworkParams seg = load_segmentation(dir_);
    const ClassifierParams clf = load_classifier(dir_);
    std::vector<TemperatureScalar> T;
    std::vector<LocalTemperature> lts;
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
      T.push_back(TemperatureScalar::from_json(read_json(dir_ / "calibration" / lead_file("temperature", lead, ".json"))));
      lts.push_back(load_local_temperature(dir_ / "calibration" / lead_file("local_temperature", lead, "")));
    }

    note("stratified report");
    std::vector<std::vector<ClassGrid>> preds;
    std::vector<std::vector<LogitGrid>> logits;
    std::vector<int> labels;
    std::vector<TypePrediction> types;
    ConfusionMatrix cm;
    for (const Scenario* s : test) {
      logits.push_back(predict(seg, s->inputs.channels));
      std::vector<ClassGrid> p;
      for (const auto& z : logits.back()) p.push_back(argmax_class(z.z));
      preds.push_back(std::move(p));
      types.push_back(classify_type(clf, s->inputs));
      labels.push_back(static_cast<int>(types.back().label));
      ++cm.counts[static_cast<int>(s->label)][labels.back()];
    }
    const StratifiedReport rep = stratified_report(preds, test, labels);
    write_text_file(dir_ / "reports" / "stratified.csv", rep.to_csv());
    write_json(dir_ / "reports" / "stratified.json", rep.to_json());

    // all types pooled, per lead time
    nlohmann::json overall = nlohmann::json::array();
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
      ConfusionPair cp;
      for (std::size_t i = 0; i < test.size(); ++i) cp += confusions(preds[i][lead - 1], test[i]->truth_classes(lead), test[i]->mask);
      const auto pt = diagram_point(cp.over1, cp.over10, {-1, lead});
      overall.push_back({{"lead_time", lead},
                         {"modified_pod", metric_to_json(modified_pod(cp.over1, cp.over10))},
                         {"modified_far", metric_to_json(modified_far(cp.over1, cp.over10))},
                         {"modified_f1", metric_to_json(modified_f1(cp))},
                         {"success_ratio", metric_to_json(pt.success_ratio)},
                         {"csi", metric_to_json(pt.csi)},
                         {"bias", metric_to_json(pt.bias)}});
    }
    write_json(dir_ / "reports" / "overall.json", {{"leads", overall}});
    nlohmann::json cmj = nlohmann::json::array();
    for (const auto& row : cm.counts) cmj.push_back(row);
    std::vector<std::string> type_names;
    for (int t = 0; t < kNumRainTypes; ++t) type_names.emplace_back(rain_type_name(static_cast<RainType>(t)));
    write_json(dir_ / "reports" / "classifier.json",
               {{"types", type_names}, {"confusion", cmj}, {"accuracy", cm.accuracy()}, {"test_cases", cm.total()}});
    write_json(dir_ / "reports" / "diagram_geometry.json", performance_diagram_geometry());
    art("report.stratified.csv", "reports/stratified.csv");
    art("report.stratified.json", "reports/stratified.json");
    art("report.overall", "reports/overall.json");
    art("report.classifier", "reports/classifier.json");
    art("report.diagram_geometry", "reports/diagram_geometry.json");

    note("writing case bundles");
    nlohmann::json index = nlohmann::json::array();
    for (std::size_t i = 0; i < test.size(); ++i) {
      const Scenario& s = *test[i];
      const fs::path rel = fs::path("cases") / s.id;
      nlohmann::json grids = nlohmann::json::object();
      auto put = [&](const std::string& name, const GrdfFile& f) {
        const fs::path p = rel / (name + ".grdf");
        write_grdf(dir_ / p, f);
        grids[name] = {{"path", p.generic_string()}, {"sha256", sha256_file(dir_ / p)}, {"dims", f.dims}, {"kind", f.kind}};
      };
      put("inputs", tensor_to_grdf(s.inputs.channels, "fused_input"));
      put("mask", mask_to_grdf(s.mask));
      nlohmann::json leads = nlohmann::json::array();
      for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
        const LogitGrid& z = logits[i][lead - 1];
        const std::string sfx = "_lead" + std::to_string(lead);
        auto with_lead = [lead](GrdfFile f) {
          f.lead_time = lead;
          return f;
        };
        put("prediction" + sfx, with_lead(class_grid_to_grdf(preds[i][lead - 1], "class_grid")));
        put("truth" + sfx, with_lead(class_grid_to_grdf(s.truth_classes(lead), "class_grid")));
        const ProbGrid raw = softmax(z);
        put("confidence_raw" + sfx, with_lead(tensor_to_grdf(confidence_of(raw).q, "confidence")));
        const auto ts = apply_temperature(z, T[lead - 1]);
        put("confidence_temperature" + sfx, with_lead(tensor_to_grdf(ts.confidence.q, "confidence")));
        put("prediction_temperature" + sfx, with_lead(class_grid_to_grdf(argmax_class(ts.probs), "class_grid")));
        const auto lt = apply_local_temperature(lts[lead - 1], z, s.inputs.channels);
        put("confidence_local_temperature" + sfx, with_lead(tensor_to_grdf(lt.confidence.q, "confidence")));
        put("prediction_local_temperature" + sfx, with_lead(class_grid_to_grdf(argmax_class(lt.probs), "class_grid")));
        const ConfusionPair cp = confusions(preds[i][lead - 1], s.truth_classes(lead), s.mask);
        leads.push_back({{"lead_time", lead},
                         {"temperature", T[lead - 1].T},
                         {"modified_pod", metric_to_json(modified_pod(cp.over1, cp.over10))},
                         {"modified_far", metric_to_json(modified_far(cp.over1, cp.over10))},
                         {"modified_f1", metric_to_json(modified_f1(cp))}});
      }
      nlohmann::json layers = nlohmann::json::array();
      for (const auto& layer : supplementary_layers(s)) {
        put("layer_" + layer.name, tensor_to_grdf(layer.grid, "supplementary"));
        layers.push_back({{"name", layer.name}, {"description", layer.description}, {"model_input", false},
                          {"grid", "layer_" + layer.name}});
      }
      std::vector<double> probs(types[i].probabilities.begin(), types[i].probabilities.end());
      nlohmann::json bundle = {
          {"id", s.id},
          {"rain_type", rain_type_name(s.label)},
          {"height", s.inputs.height()},
          {"width", s.inputs.width()},
          {"km_per_pixel", s.spec.km_per_pixel},
          {"issue_time_minutes", issue_time_minutes(s.spec.seed)},
          {"classifier", {{"label", rain_type_name(types[i].label)}, {"probabilities", probs}, {"types", type_names}}},
          {"leads", leads},
          {"grids", grids},
          {"supplementary_layers", layers}};
      write_json(dir_ / rel / "bundle.json", bundle);
      art("case." + s.id, (rel / "bundle.json").generic_string());
      index.push_back({{"id", s.id},
                       {"rain_type", rain_type_name(s.label)},
                       {"predicted_type", rain_type_name(types[i].label)},
                       {"modified_f1", [&] {
                          nlohmann::json a = nlohmann::json::array();
                          for (const auto& l : leads) a.push_back(l.at("modified_f1").at("value"));
                          return a;
                        }()}});
    }
    write_json(dir_ / "cases" / "index.json", {{"cases", index}});
    art("cases.index", "cases/index.json");
  }

  const RunStore& store_;
  RunRecord& rec_;
  const ServiceConfig& cfg_;
  fs::path dir_;
  const ProgressFn& progress_;
  std::vector<Scenario> data_;
  bool data_loaded_ = false;
};

bool is_validation_error(const std::exception& e) {
  return dynamic_cast<const InvalidParameter*>(&e) || dynamic_cast<const InvalidInput*>(&e) ||
         dynamic_cast<const InvalidSpec*>(&e);
}

}  // namespace

RunRecord run_stage(const RunStore& store, const ServiceConfig& cfg, Stage stage, const ProgressFn& progress) {
  cfg.validate();
  RunRecord rec = store.create_or_load(cfg);
  if (rec.status == RunStatus::Done || rec.stage_done(stage)) return rec;
  StageRunner runner(store, rec, cfg, progress);
  for (Stage s : kStages) {
    if (rec.stage_done(s)) continue;
    rec.status = RunStatus::Running;
    rec.failed_stage.clear();
    rec.error.clear();
    rec.error_kind.clear();
    rec.updated = now_iso();
    store.save(rec);
    try {
      runner.run(s);
    } catch (const std::exception& e) {
      rec.status = RunStatus::Failed;
      rec.failed_stage = std::string(stage_name(s));
      rec.error = e.what();
      rec.error_kind = is_validation_error(e) ? "validation" : "failure";
      rec.updated = now_iso();
      store.save(rec);
      return rec;
    }
    rec.completed_stages.emplace_back(stage_name(s));
    rec.status = rec.completed_stages.size() == kStages.size() ? RunStatus::Done : RunStatus::Pending;
    rec.updated = now_iso();
    store.save(rec);
    if (s == stage) break;
  }
  return rec;
}

RunRecord run_pipeline(const RunStore& store, const ServiceConfig& cfg, const ProgressFn& progress) {
  return run_stage(store, cfg, Stage::Report, progress);
}

LoadedRun load_run(const RunStore& store, const std::string& run_id) {
  auto rec = store.load(run_id);
  if (!rec) throw InvalidInput("unknown run: " + run_id);
  LoadedRun r;
  r.record = *rec;
  r.dir = store.run_dir(run_id);
  r.config = ServiceConfig::from_json(rec->config);
  if (rec->status == RunStatus::Done) {
    r.segmentation = load_segmentation(r.dir);
    r.test_ids = read_split(r.dir).test;
  }
  return r;
}

std::vector<SupplementaryLayer> supplementary_layers(const Scenario& s) {
  const int h = s.inputs.height(), w = s.inputs.width();
  SupplementaryLayer terrain{"terrain_proxy",
                             "Synthetic elevation proxy from the normalised coordinates (display only)",
                             Tensor(1, h, w)};
  SupplementaryLayer coverage{"radar_coverage", "Effective radar coverage used for masking", Tensor(1, h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double lon = s.inputs.channels.at(kLonChannel, y, x);
      const double lat = s.inputs.channels.at(kLatChannel, y, x);
      // ridge running north-east with a coastal lowland in the south-west
      terrain.grid.at(0, y, x) = std::max(0.0, std::sin(3.0 * lon + 2.0 * lat) * 0.5 + lon * lat);
      coverage.grid.at(0, y, x) = s.mask(y, x) ? 1.0 : 0.0;
    }
  }
  quantize_to_float32(terrain.grid);
  return {std::move(terrain), std::move(coverage)};
}

}  // namespace nowcast
