#include <atomic>
#include <charconv>
#include <future>
#include <set>
#include <sstream>
#include <variant>

#include <httplib.h>

#include "nowcast/grdf.hpp"
#include "nowcast/service.hpp"

namespace nowcast {

namespace fs = std::filesystem;
using Query = std::multimap<std::string, std::string>;

namespace {

ApiResponse json_response(int status, const nlohmann::json& j, bool immutable) {
  ApiResponse r;
  r.status = status;
  r.body = j.dump();
  if (immutable) r.etag = sha256_hex(r.body);
  return r;
}

ApiResponse error_response(int status, const std::string& message,
                           const nlohmann::json& allowed = nullptr) {
  nlohmann::json j = {{"error", message}};
  if (!allowed.is_null()) j["allowed"] = allowed;
  return json_response(status, j, false);
}

/// Thrown by parameter parsers; turned into a 400 listing the allowed values.
struct BadRequest {
  std::string message;
  nlohmann::json allowed;
};

std::optional<std::string> query_value(const Query& q, const std::string& key) {
  auto it = q.find(key);
  if (it == q.end()) return std::nullopt;
  return it->second;
}

std::optional<int> int_param(const Query& q, const std::string& key, int lo, int hi, bool required) {
  const auto v = query_value(q, key);
  nlohmann::json allowed = nlohmann::json::array();
  for (int i = lo; i <= hi; ++i) allowed.push_back(i);
  if (!v) {
    if (required) throw BadRequest{"missing parameter '" + key + "'", allowed};
    return std::nullopt;
  }
  int out = 0;
  const auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc{} || p != v->data() + v->size() || out < lo || out > hi) {
    throw BadRequest{"invalid value '" + *v + "' for '" + key + "'", allowed};
  }
  return out;
}

std::string choice_param(const Query& q, const std::string& key, const std::vector<std::string>& allowed,
                         const std::string& fallback) {
  const auto v = query_value(q, key);
  if (!v) {
    if (fallback.empty()) throw BadRequest{"missing parameter '" + key + "'", allowed};
    return fallback;
  }
  if (std::find(allowed.begin(), allowed.end(), *v) == allowed.end()) {
    throw BadRequest{"invalid value '" + *v + "' for '" + key + "'", allowed};
  }
  return *v;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> out;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '/')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

bool safe_name(const std::string& s) {
  if (s.empty() || s == "." || s == "..") return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

std::vector<std::string> rain_type_names() {
  std::vector<std::string> out;
  for (int t = 0; t < kNumRainTypes; ++t) out.emplace_back(rain_type_name(static_cast<RainType>(t)));
  return out;
}

nlohmann::json run_summary(const RunRecord& r) {
  nlohmann::json j = {{"run_id", r.run_id},
                      {"status", status_name(r.status)},
                      {"completed_stages", r.completed_stages},
                      {"created", r.created},
                      {"updated", r.updated}};
  if (r.status == RunStatus::Failed) {
    j["failed_stage"] = r.failed_stage;
    j["error"] = r.error;
  }
  return j;
}

const std::vector<std::string> kExplainMethods = {"ig", "saliency", "smoothig"};
const std::vector<std::string> kCalibratedMethods = {"temperature", "local_temperature"};

}  // namespace

struct ApiService::Impl {
  RunStore store;
  std::string run_id;

  std::mutex mu;
  std::optional<LoadedRun> run;
  std::map<std::string, std::shared_ptr<const Scenario>> scenarios;
  std::map<std::string, std::shared_future<std::shared_ptr<const AttributionMap>>> inflight;
  std::atomic<int> computations{0};

  explicit Impl(RunStore s, std::string id) : store(std::move(s)), run_id(std::move(id)) {}

  fs::path dir() const { return store.run_dir(run_id); }

  /// Current record; nullopt when the service has no run.
  std::optional<RunRecord> record() const {
    if (run_id.empty()) return std::nullopt;
    return store.load(run_id);
  }

  /// Loaded Done run, or an error response.
  std::variant<const LoadedRun*, ApiResponse> done_run() {
    const auto rec = record();
    if (!rec) return error_response(404, run_id.empty() ? "no run selected" : "unknown run: " + run_id);
    if (rec->status != RunStatus::Done) {
      return error_response(409, "run " + run_id + " is " + std::string(status_name(rec->status)) +
                                     "; finish it with `nowcast-xai run` first");
    }
    std::lock_guard lock(mu);
    if (!run) run = load_run(store, run_id);
    return &*run;
  }

  bool is_test_case(const LoadedRun& r, const std::string& id) const {
    return std::find(r.test_ids.begin(), r.test_ids.end(), id) != r.test_ids.end();
  }

  std::shared_ptr<const Scenario> scenario(const std::string& id) {
    std::lock_guard lock(mu);
    if (auto it = scenarios.find(id); it != scenarios.end()) return it->second;
    const std::vector<std::string> only{id};
    auto loaded = read_dataset(dir() / "data", &only);
    if (loaded.empty()) throw InvalidInput("scenario missing from dataset: " + id);
    auto p = std::make_shared<const Scenario>(std::move(loaded.front()));
    scenarios.emplace(id, p);
    return p;
  }

  ApiResponse file_response(const fs::path& rel, const std::string& content_type) const {
    const fs::path p = dir() / rel;
    if (!fs::exists(p)) return error_response(404, "no such artifact: " + rel.generic_string());
    ApiResponse r;
    r.content_type = content_type;
    const auto bytes = read_file_bytes(p);
    r.body.assign(bytes.begin(), bytes.end());
    r.etag = sha256_hex(r.body);
    return r;
  }

  nlohmann::json read_json(const fs::path& rel) const {
    return nlohmann::json::parse(read_text_file(dir() / rel));
  }

  // ---- endpoints

  ApiResponse runs() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : store.list()) arr.push_back(run_summary(r));
    return json_response(200, {{"runs", arr}, {"selected", run_id}}, false);
  }

  ApiResponse run_detail(const std::string& id) const {
    const auto r = store.load(id);
    if (!r) return error_response(404, "unknown run: " + id);
    return json_response(200, r->to_json(), r->status == RunStatus::Done);
  }

  ApiResponse cases(const Query& q) {
    std::optional<std::string> type;
    if (query_value(q, "rain_type")) type = choice_param(q, "rain_type", rain_type_names(), "");
    const auto lead = int_param(q, "lead", 1, kNumLeadTimes, false);
    if (run_id.empty()) return json_response(200, {{"cases", nlohmann::json::array()}}, false);
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    const auto index = read_json("cases/index.json");
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : index.at("cases")) {
      if (type && c.at("rain_type") != *type) continue;
      nlohmann::json e = c;
      if (lead) {
        e["lead_time"] = *lead;
        e["modified_f1"] = c.at("modified_f1").at(*lead - 1);
      }
      out.push_back(e);
    }
    return json_response(200, {{"run_id", run_id}, {"cases", out}}, true);
  }

  ApiResponse case_bundle(const std::string& id) {
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    if (!safe_name(id) || !is_test_case(*std::get<const LoadedRun*>(dr), id)) {
      return error_response(404, "unknown case: " + id);
    }
    auto bundle = read_json(fs::path("cases") / id / "bundle.json");
    for (auto& [name, g] : bundle.at("grids").items()) {
      g["url"] = "/v1/cases/" + id + "/grids/" + name;
    }
    bundle["attribution"] = {
        {"url", "/v1/explain/" + id},
        {"methods", kExplainMethods},
        {"classes", {0, 1, 2}},
        {"lead_times", {1, 2, 3, 4, 5, 6}}};
    return json_response(200, bundle, true);
  }

  ApiResponse case_grid(const std::string& id, const std::string& name) {
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    if (!safe_name(id) || !safe_name(name) || !is_test_case(*std::get<const LoadedRun*>(dr), id)) {
      return error_response(404, "unknown case grid");
    }
    return file_response(fs::path("cases") / id / (name + ".grdf"), "application/octet-stream");
  }

  std::shared_ptr<const AttributionMap> attribution(const LoadedRun& r, const std::string& id, int lead,
                                                    int cls, const std::string& method) {
    const std::string key = id + "_lead" + std::to_string(lead) + "_class" + std::to_string(cls) + "_" + method;
    const fs::path cached = dir() / "explain" / "cache" / (key + ".grdf");
    std::promise<std::shared_ptr<const AttributionMap>> promise;
    std::optional<std::shared_future<std::shared_ptr<const AttributionMap>>> pending;
    {
      std::lock_guard lock(mu);
      if (auto it = inflight.find(key); it != inflight.end()) {
        pending = it->second;
      } else {
        inflight.emplace(key, promise.get_future().share());
      }
    }
    if (pending) return pending->get();
    try {
      std::shared_ptr<const AttributionMap> map;
      if (fs::exists(cached)) {
        map = std::make_shared<const AttributionMap>(load_attribution(cached));
      } else {
        const auto s = scenario(id);
        const auto& ex = r.config.explain;
        AttributionConfig ac;
        ac.steps = ex.steps;
        ac.n_samples = ex.n_samples;
        ac.noise_sigma = ex.noise_sigma.value_or(-1.0);
        ac.seed = splitmix64(r.config.explain_seed() ^ std::hash<std::string>{}(key));
        const auto target = AttributionTarget::over_mask(lead, cls, s->mask);
        auto computed = attribute(method_from_name(method), r.segmentation.graph, s->inputs.channels, target, ac);
        ++computations;
        quantize_to_float32(computed.a);
        // serialised per key by the in-flight entry; temp + rename keeps readers safe
        const fs::path tmp = cached.string() + ".tmp";
        save_attribution(tmp, computed);
        fs::rename(tmp, cached);
        map = std::make_shared<const AttributionMap>(std::move(computed));
      }
      promise.set_value(map);
      std::lock_guard lock(mu);
      inflight.erase(key);
      return map;
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mu);
      inflight.erase(key);
      throw;
    }
  }

  ApiResponse explain(const std::string& id, const Query& q, bool grid) {
    const int lead = *int_param(q, "lead", 1, kNumLeadTimes, true);
    const int cls = *int_param(q, "class", 0, kNumClasses - 1, true);
    const std::string method = choice_param(q, "method", kExplainMethods, "ig");
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    const LoadedRun& r = *std::get<const LoadedRun*>(dr);
    if (!safe_name(id) || !is_test_case(r, id)) return error_response(404, "unknown case: " + id);
    const auto map = attribution(r, id, lead, cls, method);
    const std::string key = id + "_lead" + std::to_string(lead) + "_class" + std::to_string(cls) + "_" + method;
    if (grid) return file_response(fs::path("explain") / "cache" / (key + ".grdf"), "application/octet-stream");
    auto payload = render_payload(*map);
    payload["id"] = id;
    payload["grid"] = {{"url", "/v1/explain/" + id + "/grid?lead=" + std::to_string(lead) +
                                   "&class=" + std::to_string(cls) + "&method=" + method},
                       {"sha256", sha256_file(dir() / "explain" / "cache" / (key + ".grdf"))}};
    return json_response(200, payload, true);
  }

  ApiResponse confidence(const std::string& id, const Query& q) {
    const int lead = *int_param(q, "lead", 1, kNumLeadTimes, true);
    const std::string cal = choice_param(q, "calibrated", {"true", "false"}, "false");
    const std::string method = choice_param(q, "method", kCalibratedMethods, "temperature");
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    if (!safe_name(id) || !is_test_case(*std::get<const LoadedRun*>(dr), id)) {
      return error_response(404, "unknown case: " + id);
    }
    const auto bundle = read_json(fs::path("cases") / id / "bundle.json");
    const std::string sfx = "_lead" + std::to_string(lead);
    const bool calibrated = cal == "true";
    const std::string pred = calibrated ? "prediction_" + method + sfx : "prediction" + sfx;
    const std::string conf = calibrated ? "confidence_" + method + sfx : "confidence_raw" + sfx;
    auto ref = [&](const std::string& name) {
      nlohmann::json g = bundle.at("grids").at(name);
      g["name"] = name;
      g["url"] = "/v1/cases/" + id + "/grids/" + name;
      return g;
    };
    nlohmann::json out = {{"id", id},
                          {"lead_time", lead},
                          {"calibrated", calibrated},
                          {"method", calibrated ? method : "none"},
                          {"prediction", ref(pred)},
                          {"confidence", ref(conf)},
                          {"confidence_domain", {1.0 / kNumClasses, 1.0}}};
    if (calibrated && method == "temperature") out["temperature"] = bundle.at("leads").at(lead - 1).at("temperature");
    return json_response(200, out, true);
  }

  ApiResponse performance(const Query& q) {
    std::optional<std::string> type;
    if (query_value(q, "type")) type = choice_param(q, "type", rain_type_names(), "");
    const auto lead = int_param(q, "lead", 1, kNumLeadTimes, false);
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    const auto rep = read_json("reports/stratified.json");
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : rep.at("cells")) {
      if (type && c.at("rain_type") != *type) continue;
      if (lead && c.at("lead_time") != *lead) continue;
      cells.push_back(c);
    }
    nlohmann::json out = nlohmann::json::object();
    out["cells"] = cells;
    out["overall"] = read_json("reports/overall.json").at("leads");
    out["geometry"] = read_json("reports/diagram_geometry.json");
    out["training_data"] = training_description(std::get<const LoadedRun*>(dr)->config);
    return json_response(200, out, true);
  }

  nlohmann::json training_description(const ServiceConfig& cfg) const {
    const auto split = read_json("split.json");
    return {{"description", "Synthetic radar scenarios with analytically advected rain cells; the "
                            "classifier label of each case selects the performance row."},
            {"profile", cfg.data.profile},
            {"types", rain_type_names()},
            {"train_cases", split.at("train").size()},
            {"val_cases", split.at("val").size()},
            {"test_cases", split.at("test").size()}};
  }

  ApiResponse reliability(const Query& q) {
    const auto lead = int_param(q, "lead", 1, kNumLeadTimes, false);
    const std::vector<std::string> methods = {"none", "temperature", "local_temperature", "platt",
                                              "histogram_binning"};
    std::optional<std::string> method;
    if (query_value(q, "method")) method = choice_param(q, "method", methods, "");
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    const auto rel = read_json("calibration/reliability.json");
    const auto ece = read_json("calibration/ece.json");
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < rel.at("leads").size(); ++i) {
      const auto& lr = rel.at("leads").at(i);
      const auto& er = ece.at("rows").at(i);
      const int l = lr.at("lead_time").get<int>();
      if (lead && l != *lead) continue;
      nlohmann::json row = {{"lead_time", l}, {"ece_before", er.at("before")}};
      nlohmann::json bins = nlohmann::json::object(), after = nlohmann::json::object();
      for (const auto& m : methods) {
        if (method && m != *method) continue;
        bins[m] = lr.at(m);
        if (m != "none") after[m] = er.at("after").at(m);
      }
      row["bins"] = bins;
      row["ece_after"] = after;
      row["sampled_before"] = er.at("sampled_before");
      row["sampled_after"] = er.at("sampled_after");
      rows.push_back(row);
    }
    return json_response(200, {{"bins", rel.at("bins")}, {"leads", rows}}, true);
  }

  ApiResponse report_file(const std::string& name) {
    static const std::map<std::string, std::pair<std::string, std::string>> files = {
        {"ece.csv", {"calibration/ece.csv", "text/csv"}},
        {"ece.json", {"calibration/ece.json", "application/json"}},
        {"stratified.csv", {"reports/stratified.csv", "text/csv"}},
        {"stratified.json", {"reports/stratified.json", "application/json"}},
        {"classifier.json", {"reports/classifier.json", "application/json"}},
        {"deletion.json", {"explain/deletion.json", "application/json"}},
        {"receptive_field.json", {"explain/receptive_field.json", "application/json"}}};
    auto it = files.find(name);
    if (it == files.end()) {
      nlohmann::json allowed = nlohmann::json::array();
      for (const auto& [k, _] : files) allowed.push_back(k);
      return error_response(404, "unknown report: " + name, allowed);
    }
    auto dr = done_run();
    if (auto* e = std::get_if<ApiResponse>(&dr)) return *e;
    return file_response(it->second.first, it->second.second);
  }

  ApiResponse route(const std::string& method, const std::string& path, const Query& q) {
    const auto parts = split_path(path);
    if (parts.empty() || parts[0] != "v1") return error_response(404, "unknown endpoint: " + path);
    if (method != "GET") return error_response(405, "only GET is supported");
    const std::size_t n = parts.size();
    const std::string res = n > 1 ? parts[1] : "";
    if (res == "runs" && n == 2) return runs();
    if (res == "runs" && n == 3) return run_detail(parts[2]);
    if (res == "cases" && n == 2) return cases(q);
    if (res == "cases" && n == 3) return case_bundle(parts[2]);
    if (res == "cases" && n == 5 && parts[3] == "grids") return case_grid(parts[2], parts[4]);
    if (res == "explain" && n == 3) return explain(parts[2], q, false);
    if (res == "explain" && n == 4 && parts[3] == "grid") return explain(parts[2], q, true);
    if (res == "confidence" && n == 3) return confidence(parts[2], q);
    if (res == "performance" && n == 2) return performance(q);
    if (res == "reliability" && n == 2) return reliability(q);
    if (res == "reports" && n == 3) return report_file(parts[2]);
    return error_response(404, "unknown endpoint: " + path);
  }
};

ApiService::ApiService(const RunStore& store, std::string run_id)
    : impl_(std::make_shared<Impl>(store, run_id)), run_id_(std::move(run_id)) {}

ApiResponse ApiService::handle(const std::string& method, const std::string& path, const Query& query) const {
  try {
    // a query string left in the path (e.g. a URL taken from a payload) is merged in
    if (const auto qm = path.find('?'); qm != std::string::npos) {
      Query merged = query;
      std::stringstream ss(path.substr(qm + 1));
      std::string kv;
      while (std::getline(ss, kv, '&')) {
        const auto eq = kv.find('=');
        if (eq != std::string::npos) merged.emplace(kv.substr(0, eq), kv.substr(eq + 1));
      }
      return impl_->route(method, path.substr(0, qm), merged);
    }
    return impl_->route(method, path, query);
  } catch (const BadRequest& e) {
    return error_response(400, e.message, e.allowed);
  } catch (const InvalidParameter& e) {
    return error_response(400, e.what());
  } catch (const InvalidInput& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

int ApiService::explain_computations() const { return impl_->computations.load(); }

void serve(const ApiService& api, const ServeOptions& opts) {
  httplib::Server srv;
  srv.Get(R"(/v1/.*)", [&api](const httplib::Request& req, httplib::Response& res) {
    Query q(req.params.begin(), req.params.end());
    const ApiResponse r = api.handle("GET", req.path, q);
    if (!r.etag.empty()) {
      const std::string etag = "\"" + r.etag + "\"";
      res.set_header("ETag", etag);
      if (req.get_header_value("If-None-Match") == etag) {
        res.status = 304;
        return;
      }
    }
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  });
  if (opts.static_dir) {
    if (!srv.set_mount_point("/", opts.static_dir->string())) {
      throw InvalidParameter("static directory not found: " + opts.static_dir->string());
    }
  }
  if (!srv.listen(opts.host, opts.port)) {
    throw Error("could not listen on " + opts.host + ":" + std::to_string(opts.port));
  }
}

}  // namespace nowcast
