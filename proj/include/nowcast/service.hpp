#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/attribution.hpp"
#include "nowcast/calibration.hpp"
#include "nowcast/datagen.hpp"
#include "nowcast/model.hpp"

namespace nowcast {

struct DataConfig {
  TypeCounts profile = kDefaultProfile;
  GridSize grid{};
  double km_per_pixel = 2.0;
  std::array<double, 3> split{0.6, 0.2, 0.2};
};

struct ExplainConfig {
  std::vector<std::string> methods{"ig", "random", "saliency"};
  int deletion_cases = 30;
  int lead_time = 1;
  int target_class = 1;
  int steps = 64;
  int n_samples = 16;
  std::optional<double> noise_sigma;  // unset = 10% of the radar range per case
  std::vector<double> ks = kDefaultDeletionKs;
  int rf_cases = 16;
  int rf_steps = 16;
  int rf_samples = 8;
};

struct CalibrationConfig {
  int ece_bins = 10;
  int binning_bins = 10;
  SamplingProfile sampling{};
  LtsConfig lts{};
};

/// Complete pipeline configuration. Stage seeds derive from `seed`.
struct ServiceConfig {
  std::uint64_t seed = 2024;
  DataConfig data;
  ArchConfig arch;
  TrainConfig segmentation;  // seed field ignored, derived
  TrainConfig classifier;
  CalibrationConfig calibration;
  ExplainConfig explain;

  ServiceConfig();
  void validate() const;
  /// Canonical form: every field explicit, derived seeds filled in.
  nlohmann::json to_json() const;
  static ServiceConfig from_json(const nlohmann::json& j);
  std::string run_id() const;

  std::uint64_t data_seed() const { return seed; }
  TrainConfig segmentation_train() const;
  TrainConfig classifier_train() const;
  LtsConfig lts() const;
  std::uint64_t explain_seed() const;
};

enum class RunStatus { Pending, Running, Done, Failed };
std::string_view status_name(RunStatus s);
RunStatus status_from_name(std::string_view s);

enum class Stage { GenData, Train, Calibrate, Explain, Report };
inline constexpr std::array<Stage, 5> kStages = {Stage::GenData, Stage::Train, Stage::Calibrate,
                                                 Stage::Explain, Stage::Report};
std::string_view stage_name(Stage s);
Stage stage_from_name(std::string_view s);

struct ArtifactRef {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct RunRecord {
  std::string run_id;
  nlohmann::json config;
  RunStatus status = RunStatus::Pending;
  std::vector<std::string> completed_stages;
  std::map<std::string, ArtifactRef> artifacts;
  std::string failed_stage;
  std::string error;
  std::string error_kind;  // "validation" or "failure"
  std::string created;
  std::string updated;

  bool stage_done(Stage s) const;
  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

/// Directory of runs: <root>/runs/<run_id>/run.json plus artifacts.
class RunStore {
 public:
  explicit RunStore(std::filesystem::path root);
  /// NOWCAST_XAI_HOME if set, otherwise ./nowcast-xai-home.
  static std::filesystem::path default_root();

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path run_dir(const std::string& run_id) const;
  std::optional<RunRecord> load(const std::string& run_id) const;
  void save(const RunRecord& rec) const;
  std::vector<RunRecord> list() const;
  RunRecord create_or_load(const ServiceConfig& cfg) const;
  /// Hashes `rel` inside the run directory and records it under `name`.
  void register_artifact(RunRecord& rec, const std::string& name, const std::string& rel) const;

 private:
  std::filesystem::path root_;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Runs `stage` (and any missing earlier stages). Stage errors are caught and
/// persisted as a Failed record, which is returned.
RunRecord run_stage(const RunStore& store, const ServiceConfig& cfg, Stage stage,
                    const ProgressFn& progress = {});
/// All stages; a Done run is returned unchanged.
RunRecord run_pipeline(const RunStore& store, const ServiceConfig& cfg,
                       const ProgressFn& progress = {});

/// Artifacts of a finished run, loaded for serving.
struct LoadedRun {
  RunRecord record;
  std::filesystem::path dir;
  ServiceConfig config;
  NetworkParams segmentation;
  std::vector<std::string> test_ids;
};
LoadedRun load_run(const RunStore& store, const std::string& run_id);

/// Display-only grid aligned with a case.
struct SupplementaryLayer {
  std::string name;
  std::string description;
  Tensor grid;  // 1 x H x W
};
std::vector<SupplementaryLayer> supplementary_layers(const Scenario& s);

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::string etag;
};

/// Transport-independent /v1 API over one run.
class ApiService {
 public:
  ApiService(const RunStore& store, std::string run_id);

  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::multimap<std::string, std::string>& query) const;
  /// Number of attribution maps computed (not served from cache) so far.
  int explain_computations() const;
  const std::string& run_id() const { return run_id_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  std::string run_id_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> static_dir;
};

/// Blocks serving the API (and optional static files) until the process ends.
void serve(const ApiService& api, const ServeOptions& opts);

}  // namespace nowcast
