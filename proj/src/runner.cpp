#include "gradshield/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "gradshield/container.hpp"
#include "gradshield/decomp.hpp"
#include "gradshield/experiments.hpp"
#include "gradshield/graddiag.hpp"
#include "gradshield/lab.hpp"
#include "gradshield/oracles.hpp"
#include "gradshield/parallel.hpp"
#include "gradshield/schema.hpp"
#include "gradshield/svg.hpp"

namespace gradshield::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- params per kind ----

const json kTraitEnum = {"broad", "narrow"};
const json kDefenseEnum = {"none", "pps", "ip"};
const json kFamilyEnum = {"", "broad", "narrow", "neutral"};

struct KindSpec {
  json defaults;
  json enums = json::object();  // param -> allowed values
  bool needs_base = true;
};

const std::map<std::string, KindSpec>& kind_specs() {
  static const std::map<std::string, KindSpec> specs = [] {
    std::map<std::string, KindSpec> m;
    m["gen-data"] = {{{"trait", "broad"}, {"intensity", 0.8}, {"n", 400}, {"label", 1}, {"anti", false}, {"marker", ""}},
                     {{"trait", kTraitEnum}, {"marker", kFamilyEnum}},
                     false};
    m["train-base"] = {json::object(), json::object(), false};
    m["extract-pv"] = {{{"trait", "broad"}}, {{"trait", kTraitEnum}}};
    m["finetune"] = {{{"trait", "broad"},
                      {"intensity", 0.8},
                      {"defense", "none"},
                      {"epsilon", 1.5},
                      {"layers", json::array()},
                      {"family", ""},
                      {"role", 0}},
                     {{"trait", kTraitEnum}, {"defense", kDefenseEnum}, {"family", kFamilyEnum}}};
    m["grad-cosine"] = {{{"trait", "broad"},
                         {"intensity", 0.8},
                         {"samples", 64},
                         {"layers", json::array()},
                         {"defense", "pps"},
                         {"epsilon", 1.5},
                         {"family", ""},
                         {"vector", "trait"}},
                        {{"trait", kTraitEnum},
                         {"defense", kDefenseEnum},
                         {"family", kFamilyEnum},
                         {"vector", {"trait", "random"}}}};
    m["manip-grid"] = {{{"trait", "broad"}}, {{"trait", kTraitEnum}}};
    m["loss-analysis"] = {{{"trait", "broad"}, {"intensity", 0.8}, {"samples", 64}, {"family", ""}},
                          {{"trait", kTraitEnum}, {"family", kFamilyEnum}}};
    m["intensity-sweep"] = {{{"trait", "broad"},
                             {"intensity", 0.8},
                             {"samples", 64},
                             {"epsilons", {0.0, 0.5, 1.5, 3.0}},
                             {"marker", false},
                             {"trained", false}},
                            {{"trait", kTraitEnum}}};
    m["delta-analysis"] = {{{"trait", "broad"},
                            {"intensity", 0.8},
                            {"samples", 16},
                            {"lr", 0.01},
                            {"layers", json::array()},
                            {"defense", "pps"},
                            {"epsilon", 1.5}},
                           {{"trait", kTraitEnum}, {"defense", kDefenseEnum}}};
    m["ip-vs-pps"] = {{{"trait", "broad"},
                       {"intensity", 0.8},
                       {"samples", 64},
                       {"epsilons", {0.5, 1.0}},
                       {"family", ""},
                       {"behavior", false}},
                      {{"trait", kTraitEnum}, {"family", kFamilyEnum}}};
    m["decomp"] = {{{"trait", "broad"}, {"intensity", 0.8}, {"samples", 64}, {"layer", 0}, {"epsilon", 1.5}},
                   {{"trait", kTraitEnum}}};
    m["cross-trait"] = {{{"epsilons", {1.5}}, {"layers", json::array()}, {"behavior", true}}, json::object()};
    m["matrix"] = {{{"trait", "broad"}, {"pre", {"none", "medium", "heavy"}}, {"post", {"medium", "heavy"}}},
                   {{"trait", kTraitEnum}}};
    m["hyper-sweep"] = {{{"trait", "broad"}, {"axis", "intensity"}, {"values", {0.4, 0.6, 0.8}}, {"epsilon", 1.5}},
                        {{"trait", kTraitEnum}, {"axis", {"rank", "intensity", "layer", "prompt-count"}}}};
    m["make-all-figures"] = {json::object(), json::object(), false};
    m["oracles"] = {{{"seed", 7}}, json::object(), false};
    return m;
  }();
  return specs;
}

json params_schema(const KindSpec& spec) {
  json s = schema::schema_from_defaults(spec.defaults);
  for (auto& [k, p] : s["properties"].items()) {
    if (spec.enums.contains(k)) {
      if (p["type"] == "array") {
        p["items"] = {{"enum", spec.enums[k]}};
      } else {
        p["enum"] = spec.enums[k];
      }
    }
    if (p["type"] == "array" && !p.contains("items")) p["items"] = {{"type", "integer"}, {"minimum", 0}};
  }
  if (s["properties"].contains("pre")) s["properties"]["pre"]["items"] = {{"enum", {"none", "medium", "heavy"}}};
  if (s["properties"].contains("post")) s["properties"]["post"]["items"] = {{"enum", {"none", "medium", "heavy"}}};
  if (s["properties"].contains("values")) s["properties"]["values"]["items"] = {{"type", "number"}};
  if (s["properties"].contains("epsilons")) s["properties"]["epsilons"]["items"] = {{"type", "number"}, {"minimum", 0}};
  return s;
}

// ---- small helpers ----

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw std::runtime_error("csv has no column '" + name + "'");
  }
  std::vector<double> numbers(const std::string& name) const {
    const std::size_t c = col(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(c < r.size() && !r[c].empty() ? std::stod(r[c]) : NAN);
    return out;
  }
  std::vector<std::string> strings(const std::string& name) const {
    const std::size_t c = col(name);
    std::vector<std::string> out;
    for (const auto& r : rows) out.push_back(c < r.size() ? r[c] : "");
    return out;
  }
};

Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (first) {
      t.header = cells;
      first = false;
    } else {
      t.rows.push_back(cells);
    }
  }
  return t;
}

std::optional<Table> read_table(const fs::path& dir, const std::string& name) {
  if (!fs::exists(dir / name)) return std::nullopt;
  return parse_csv(io::read_bytes(dir / name));
}

// Rows of `t` whose column `c` equals `v`.
Table where(const Table& t, const std::string& c, const std::string& v) {
  Table out{t.header, {}};
  const std::size_t i = t.col(c);
  for (const auto& r : t.rows) {
    if (i < r.size() && r[i] == v) out.rows.push_back(r);
  }
  return out;
}

std::vector<std::string> distinct(const Table& t, const std::string& c) {
  std::vector<std::string> out;
  for (const auto& s : t.strings(c)) {
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
  const fs::path& dir() const { return dir_; }
  void text(const std::string& name, const std::string& content) { io::write_bytes(dir_ / name, content); }
  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

 private:
  fs::path dir_;
};

std::vector<std::size_t> layer_list(const json& j) { return j.get<std::vector<std::size_t>>(); }

std::vector<std::size_t> all_layers(const nn::Model& m) { return defense::all_block_layers(m.config()); }

struct Context {
  json config;
  lab::LabConfig cfg;
  std::unique_ptr<lab::World> world;
  std::uint64_t seed = 0;
  json seeds = json::object();
  std::optional<nn::Model> base;

  const json& params() const { return config["params"]; }
  std::uint64_t derived(const std::string& what, std::uint64_t label) {
    const std::uint64_t s = derive_seed(seed, label);
    seeds[what] = s;
    return s;
  }
  std::string trait() const { return params().value("trait", std::string("broad")); }
  std::string family() const {
    const std::string f = params().value("family", std::string());
    return f.empty() ? trait() : f;
  }
  double intensity() const { return params().value("intensity", cfg.heavy_intensity); }
  corpus::Corpus probe() const {
    return world->probe_corpus(trait(), intensity(), params().value("samples", cfg.probe_samples));
  }

  personas::PersonaVector vector(const std::string& trait_name) {
    const auto& inputs = config["inputs"];
    if (inputs.contains("vectors") && inputs["vectors"].contains(trait_name)) {
      const fs::path p = inputs["vectors"][trait_name].get<std::string>();
      if (!fs::exists(p)) throw MissingInputError("vector file not found: " + p.string());
      return personas::load_vector(p);
    }
    return lab::extract_trait_vector(*world, *base, trait_name);
  }

  defense::DefenseSpec make_defense(const std::string& kind, const personas::PersonaVector& v, double epsilon,
                                    const std::vector<std::size_t>& layers) const {
    if (kind == "none") return defense::DefenseSpec::none();
    if (kind == "ip") return lab::ip_defense(*world, family());
    return defense::DefenseSpec::pps(v, layers.empty() ? std::vector<std::size_t>{cfg.steering_layer} : layers, epsilon);
  }
};

// ---- figures from CSVs ----

using Figures = std::map<std::string, std::string>;

void trajectory_figure(const fs::path& dir, const std::string& csv, Figures& out) {
  if (auto t = read_table(dir, csv)) {
    svg::PlotOptions o;
    o.title = "training loss";
    o.x_label = "step";
    o.y_label = "loss";
    o.lines = true;
    out["loss.svg"] = svg::plot({{"loss", t->numbers("step"), t->numbers("loss")}}, o);
  }
}

Figures figures_for(const std::string& kind, const fs::path& dir) {
  Figures out;
  if (kind == "train-base" || kind == "finetune") trajectory_figure(dir, "trajectory.csv", out);
  if (kind == "gen-data") {
    if (auto t = read_table(dir, "labels.csv")) {
      std::vector<svg::Bar> bars;
      const auto labels = t->numbers("trait_label");
      for (int b = 0; b < 10; ++b) {
        double c = 0;
        for (double l : labels) c += (std::min(9, static_cast<int>(l / 10.0)) == b) ? 1 : 0;
        bars.push_back({std::to_string(10 * b) + "-" + std::to_string(10 * b + 10), c});
      }
      svg::PlotOptions o;
      o.title = "trait label histogram";
      o.y_label = "samples";
      out["labels.svg"] = svg::bar_chart(bars, o);
    }
  }
  if (kind == "extract-pv") {
    if (auto t = read_table(dir, "norms.csv")) {
      svg::PlotOptions o;
      o.title = "vector norm per layer";
      o.x_label = "layer";
      o.y_label = "norm";
      o.lines = true;
      out["norms.svg"] = svg::plot({{"", t->numbers("layer"), t->numbers("norm")}}, o);
    }
  }
  if (kind == "grad-cosine") {
    if (auto t = read_table(dir, "sample_means.csv")) {
      for (const auto& layer : distinct(*t, "layer")) {
        const auto rows = where(*t, "layer", layer);
        svg::PlotOptions o;
        o.title = "per-sample mean cosine, layer " + layer;
        o.x_label = "defense off";
        o.y_label = "defense on";
        o.identity_line = true;
        o.quadrant_shading = true;
        out["cosine_layer" + layer + ".svg"] = svg::plot({{"", rows.numbers("mean_off"), rows.numbers("mean_on")}}, o);
      }
      if (t->rows.empty()) {
        svg::PlotOptions o;
        o.title = "per-sample mean cosine";
        out["cosine.svg"] = svg::plot({}, o);
      }
    }
  }
  if (kind == "manip-grid") {
    if (auto t = read_table(dir, "grid.csv")) {
      std::vector<svg::Bar> bars;
      for (const auto& r : t->rows) {
        bars.push_back({r[t->col("defense")] + "/" + r[t->col("vector")] + "/" + r[t->col("corpus")] + "/" +
                            r[t->col("mode")],
                        std::stod(r[t->col("score")])});
      }
      svg::PlotOptions o;
      o.title = "final trait score";
      o.y_label = "score";
      o.width = 960;
      out["grid.svg"] = svg::bar_chart(bars, o);
    }
  }
  if (kind == "loss-analysis") {
    if (auto t = read_table(dir, "loss_pairs.csv")) {
      svg::PlotOptions o;
      o.title = "response loss with and without marker";
      o.x_label = "loss with marker";
      o.y_label = "loss without marker";
      o.identity_line = true;
      out["loss_pairs.svg"] = svg::plot({{"", t->numbers("loss_on"), t->numbers("loss_off")}}, o);
    }
  }
  if (kind == "intensity-sweep") {
    if (auto t = read_table(dir, "sweep.csv")) {
      svg::PlotOptions o;
      o.x_label = "epsilon";
      o.lines = true;
      o.title = "mean response loss";
      o.y_label = "loss";
      out["sweep_loss.svg"] = svg::plot({{"", t->numbers("epsilon"), t->numbers("mean_loss")}}, o);
      o.title = "mean C-bar";
      o.y_label = "C-bar";
      out["sweep_cbar.svg"] = svg::plot({{"", t->numbers("epsilon"), t->numbers("mean_cbar")}}, o);
    }
    if (auto t = read_table(dir, "trained.csv")) {
      svg::PlotOptions o;
      o.title = "trained trait score";
      o.x_label = "epsilon";
      o.y_label = "score";
      o.lines = true;
      out["trained.svg"] = svg::plot({{"", t->numbers("epsilon"), t->numbers("score")}}, o);
    }
  }
  if (kind == "delta-analysis") {
    if (auto t = read_table(dir, "delta_layers.csv")) {
      svg::PlotOptions o;
      o.title = "activation change against gradient";
      o.x_label = "layer";
      o.y_label = "mean cosine";
      o.lines = true;
      const auto x = t->numbers("layer");
      out["delta.svg"] = svg::plot({{"cos(dh, grad h)", x, t->numbers("cos_delta_grad")},
                                    {"cos(dh, v)", x, t->numbers("cos_delta_v")},
                                    {"cos(grad h, v)", x, t->numbers("cos_grad_v")}},
                                   o);
    }
  }
  if (kind == "ip-vs-pps") {
    if (auto t = read_table(dir, "similarity.csv")) {
      std::vector<svg::Series> series;
      for (const auto& curve : distinct(*t, "curve")) {
        const auto c = where(*t, "curve", curve);
        for (const auto& eps : distinct(c, "epsilon")) {
          const auto r = where(c, "epsilon", eps);
          series.push_back({curve + (curve == "pps" ? " eps " + eps : ""), r.numbers("layer"), r.numbers("cosine")});
        }
      }
      svg::PlotOptions o;
      o.title = "token cosine with IP gradients";
      o.x_label = "layer";
      o.y_label = "cosine";
      o.lines = true;
      out["similarity.svg"] = svg::plot(series, o);
    }
  }
  if (kind == "decomp") {
    if (auto t = read_table(dir, "spectrum.csv")) {
      std::vector<svg::Series> series;
      for (const auto& d : distinct(*t, "defense")) {
        const auto r = where(*t, "defense", d);
        series.push_back({d, r.numbers("k"), r.numbers("evr")});
      }
      svg::PlotOptions o;
      o.title = "explained second-moment ratio";
      o.x_label = "component";
      o.y_label = "EVR";
      o.lines = true;
      out["evr.svg"] = svg::plot(series, o);
    }
  }
  if (kind == "cross-trait") {
    if (auto t = read_table(dir, "cross.csv")) {
      std::vector<svg::Series> series;
      for (const auto& d : distinct(*t, "data")) {
        for (const auto& s : distinct(*t, "steer")) {
          const auto r = where(where(where(*t, "data", d), "steer", s), "compare", d);
          if (r.rows.empty()) continue;
          for (const auto& l : distinct(r, "layer")) {
            const auto rl = where(r, "layer", l);
            series.push_back({d + " data, " + s + " steer, layer " + l, rl.numbers("epsilon"), rl.numbers("cbar")});
          }
        }
      }
      svg::PlotOptions o;
      o.title = "C-bar along the data trait under cross-steering";
      o.x_label = "epsilon";
      o.y_label = "C-bar";
      o.lines = true;
      out["cross.svg"] = svg::plot(series, o);
    }
  }
  if (kind == "matrix") {
    if (auto t = read_table(dir, "matrix.csv")) {
      std::vector<svg::Bar> bars;
      for (const auto& r : t->rows) {
        if (r[t->col("defense")] == "none") continue;
        bars.push_back({r[t->col("defense")] + " " + r[t->col("pre")] + "/" + r[t->col("post")],
                        std::stod(r[t->col("delta")])});
      }
      svg::PlotOptions o;
      o.title = "defended minus defenseless score";
      o.y_label = "delta";
      o.width = 640;
      out["matrix.svg"] = svg::bar_chart(bars, o);
    }
  }
  if (kind == "hyper-sweep") {
    if (auto t = read_table(dir, "sweep.csv")) {
      svg::PlotOptions o;
      o.title = "trait score";
      o.x_label = "value";
      o.y_label = "score";
      o.lines = true;
      const auto x = t->numbers("value");
      out["sweep.svg"] = svg::plot({{"defenseless", x, t->numbers("defenseless")}, {"defended", x, t->numbers("defended")}},
                                   o);
    }
  }
  return out;
}

// ---- kinds ----

json run_gen_data(Context& c, Outputs& out) {
  const auto& p = c.params();
  auto data = c.world->generate(p["trait"], p["intensity"], p["n"], p["label"].get<std::uint64_t>(), p["anti"]);
  const std::string marker = p["marker"];
  if (!marker.empty()) {
    const auto bank = c.world->marker_bank(marker, c.cfg.marker_bank_size);
    Rng rng(c.derived("markers", 0xD1));
    for (auto& s : data) s = corpus::inject_marker(s, bank, rng, c.world->vocab());
  }
  out.text("corpus.jsonl", corpus::to_jsonl(data));
  std::ostringstream os;
  os << "sample,trait_label,marker\n";
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << i << ',' << fmt(data[i].trait_label) << ',' << (data[i].marker ? std::to_string(data[i].marker->index) : "")
       << '\n';
    total += data[i].trait_label;
  }
  out.text("labels.csv", os.str());
  return {{"n", data.size()}, {"mean_label", data.empty() ? 0.0 : total / static_cast<double>(data.size())}};
}

json run_train_base(Context& c, Outputs& out) {
  train::TrainTrajectory traj;
  nn::Model base = lab::train_base_model(*c.world, &traj);
  nn::save_checkpoint(out.dir() / "base.ckpt", base, traj.total_steps, c.cfg.seed, {{"lab", c.cfg.to_json()}});
  out.text("trajectory.csv", traj.to_csv());
  const double ppl = c.world->perplexity(base);
  return {{"final_loss", traj.final_loss()},
          {"steps", traj.total_steps},
          {"heldout_perplexity", ppl},
          {"score_broad", c.world->score(base, "broad").score},
          {"score_narrow", c.world->score(base, "narrow").score}};
}

json run_extract_pv(Context& c, Outputs& out) {
  const std::string trait = c.trait();
  const auto v = lab::extract_trait_vector(*c.world, *c.base, trait);
  personas::save_vector(out.dir() / (trait + ".pv"), v);
  std::ostringstream os;
  os << "layer,norm\n";
  const auto norms = v.norm_per_layer();
  for (std::size_t l = 0; l < norms.size(); ++l) os << l << ',' << fmt(norms[l]) << '\n';
  out.text("norms.csv", os.str());
  return {{"trait", trait}, {"norms", norms}};
}

json run_finetune(Context& c, Outputs& out) {
  const auto& p = c.params();
  corpus::Corpus data;
  if (c.config["inputs"].contains("corpus")) {
    const fs::path path = c.config["inputs"]["corpus"].get<std::string>();
    if (!fs::exists(path)) throw MissingInputError("corpus file not found: " + path.string());
    data = corpus::read_jsonl(path);
  } else {
    data = c.world->training_corpus(c.trait(), c.intensity(), p["role"].get<std::uint64_t>());
  }
  const std::string kind = p["defense"];
  personas::PersonaVector v;
  if (kind == "pps") v = c.vector(c.trait());
  const auto defense = c.make_defense(kind, v, p["epsilon"], layer_list(p["layers"]));
  nn::Model m = lab::with_adapters(*c.base, c.cfg);
  train::TrainTrajectory traj;
  try {
    traj = train::finetune(m, data, defense, c.cfg.finetune_train, c.world->vocab());
  } catch (const train::DivergenceError& e) {
    std::ostringstream os;
    os << "step,lr,loss\n";
    for (const auto& s : e.tail()) os << s.step << ',' << fmt(s.lr) << ',' << fmt(s.loss) << '\n';
    out.text("trajectory_tail.csv", os.str());
    throw;
  }
  nn::save_checkpoint(out.dir() / "finetuned.ckpt", m, traj.total_steps, c.cfg.finetune_train.seed);
  out.text("trajectory.csv", traj.to_csv());
  const auto o = lab::evaluate(*c.world, m, c.trait(), c.world->perplexity(*c.base));
  return {{"score", o.score}, {"sem", o.sem}, {"coherence", o.coherence}, {"steps", traj.total_steps},
          {"final_loss", traj.final_loss()}};
}

json run_grad_cosine(Context& c, Outputs& out) {
  const auto& p = c.params();
  auto layers = layer_list(p["layers"]);
  if (layers.empty()) layers = all_layers(*c.base);
  const auto trait_v = c.vector(c.trait());
  const bool random = p["vector"] == "random";
  const auto compare = random ? personas::random_directions(trait_v, c.derived("random_vector", 0x4A4D)) : trait_v;
  const auto defense = c.make_defense(p["defense"], trait_v, p["epsilon"], {});
  const auto r = graddiag::grad_cosine(*c.base, c.probe(), layers, compare, defense, c.world->vocab(),
                                       c.derived("markers", 3), p["vector"]);
  out.text("cosines.csv", r.to_csv());
  out.text("sample_means.csv", r.sample_means_csv());
  return r.summary();
}

json run_manip_grid(Context& c, Outputs& out) {
  const auto grid = lab::manip_grid(*c.world, *c.base, c.vector(c.trait()), c.trait());
  out.text("grid.csv", grid.to_csv());
  return grid.summary();
}

json run_loss_analysis(Context& c, Outputs& out) {
  const auto pairs =
      graddiag::loss_delta(*c.base, c.probe(), lab::ip_defense(*c.world, c.family()), c.world->vocab(), c.derived("markers", 7));
  out.text("loss_pairs.csv", graddiag::loss_pairs_csv(pairs));
  std::size_t below = 0;
  double off = 0.0, on = 0.0;
  for (const auto& q : pairs) {
    below += q.loss_on < q.loss_off ? 1 : 0;
    off += q.loss_off;
    on += q.loss_on;
  }
  const double n = static_cast<double>(std::max<std::size_t>(pairs.size(), 1));
  return {{"samples", pairs.size()}, {"marker_lowers_loss", below}, {"mean_loss_off", off / n}, {"mean_loss_on", on / n}};
}

json run_intensity_sweep(Context& c, Outputs& out) {
  const auto& p = c.params();
  const auto eps = p["epsilons"].get<std::vector<double>>();
  const auto v = c.vector(c.trait());
  std::optional<corpus::MarkerBank> bank;
  if (p["marker"].get<bool>()) bank = c.world->marker_bank(c.trait(), c.cfg.marker_bank_size);
  const auto sweep = graddiag::intensity_sweep(*c.base, c.probe(), v, {c.cfg.steering_layer}, c.cfg.steering_layer, eps,
                                               bank ? &*bank : nullptr, c.world->vocab(), c.derived("markers", 7));
  out.text("sweep.csv", graddiag::sweep_csv(sweep));
  json summary = {{"epsilons", eps}};
  if (p["trained"].get<bool>()) {
    const auto trained = lab::trained_scores_over_epsilon(*c.world, *c.base, v, eps, c.trait());
    std::ostringstream os;
    os << "epsilon,score,sem,coherence\n";
    std::vector<double> scores;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      os << fmt(eps[i]) << ',' << fmt(trained[i].score) << ',' << fmt(trained[i].sem) << ','
         << fmt(trained[i].coherence) << '\n';
      scores.push_back(trained[i].score);
    }
    out.text("trained.csv", os.str());
    summary["trained_scores"] = scores;
  }
  std::vector<double> losses;
  for (const auto& s : sweep) losses.push_back(s.mean_loss);
  summary["mean_loss"] = losses;
  return summary;
}

json run_delta_analysis(Context& c, Outputs& out) {
  const auto& p = c.params();
  auto layers = layer_list(p["layers"]);
  if (layers.empty()) layers = all_layers(*c.base);
  const auto v = c.vector(c.trait());
  train::TrainConfig sgd;
  sgd.optimizer = train::Optimizer::sgd;
  sgd.lr = p["lr"];
  const auto r = graddiag::delta_vs_grad(lab::with_adapters(*c.base, c.cfg), c.probe(), v,
                                         c.make_defense(p["defense"], v, p["epsilon"], {}), sgd, layers,
                                         c.world->vocab(), c.derived("markers", 9));
  out.text("delta.csv", r.to_csv());
  std::ostringstream os;
  os << "layer,cos_delta_grad,cos_delta_v,cos_grad_v,halving_gap\n";
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    os << r.layers[i] << ',' << fmt(r.mean_cos_delta_grad[i]) << ',' << fmt(r.mean_cos_delta_v[i]) << ','
       << fmt(r.mean_cos_grad_v[i]) << ',' << fmt(r.halving_gap[i]) << '\n';
  }
  out.text("delta_layers.csv", os.str());
  return r.summary();
}

json run_ip_vs_pps(Context& c, Outputs& out) {
  const auto& p = c.params();
  const auto bank = c.world->marker_bank(c.family(), c.cfg.marker_bank_size);
  const auto r = graddiag::ip_vs_pps_gradient_similarity(*c.base, c.probe(), bank, c.world->vocab(),
                                                         p["epsilons"].get<std::vector<double>>(),
                                                         c.derived("markers", 10));
  out.text("similarity.csv", r.to_csv());
  personas::save_vector(out.dir() / "prompt_diff.pv", r.diff_vectors);
  json summary = r.summary();
  if (p["behavior"].get<bool>()) {
    const auto data = c.world->training_corpus(c.trait(), c.intensity());
    const double ppl = c.world->perplexity(*c.base);
    const auto& ft = c.cfg.finetune_train;
    const auto none = lab::finetune_defended(*c.world, *c.base, data, defense::DefenseSpec::none(), ft, c.trait(), ppl);
    const auto pps = lab::finetune_defended(
        *c.world, *c.base, data, defense::DefenseSpec::pps(r.diff_vectors, all_layers(*c.base), 1.0), ft, c.trait(), ppl);
    const auto ip = lab::finetune_defended(*c.world, *c.base, data, defense::DefenseSpec::ip(bank), ft, c.trait(), ppl);
    summary["behavior"] = {{"none", none.outcome.score},
                           {"pps_all_layers", pps.outcome.score},
                           {"ip", ip.outcome.score},
                           {"pps_reduction", lab::relative_reduction(none.outcome.score, pps.outcome.score)},
                           {"ip_reduction", lab::relative_reduction(none.outcome.score, ip.outcome.score)}};
  }
  return summary;
}

json run_decomp(Context& c, Outputs& out) {
  const auto& p = c.params();
  const std::size_t layer = p["layer"].get<std::size_t>() ? p["layer"].get<std::size_t>() : c.cfg.steering_layer;
  const auto v = c.vector(c.trait());
  const auto probe = c.probe();
  const std::uint64_t s = c.derived("markers", 8);
  const auto pps_m = decomp::build_grad_diff_matrix(*c.base, probe, c.make_defense("pps", v, p["epsilon"], {}), layer,
                                                    c.world->vocab(), s);
  const auto ip_m = decomp::build_grad_diff_matrix(*c.base, probe, lab::ip_defense(*c.world, c.trait()), layer,
                                                   c.world->vocab(), s);
  const std::vector<decomp::ReferenceVector> refs{{"trait", v.layer(layer).values()}};
  const auto pps = decomp::uncentered_pca(pps_m, 0.95, refs, "trait");
  const auto ip = decomp::uncentered_pca(ip_m, 0.95, refs, "trait");
  decomp::save_spectrum(out.dir(), "pps", pps);
  decomp::save_spectrum(out.dir(), "ip", ip);
  std::ostringstream os;
  os << "defense,k,eigenvalue,evr,cos_trait\n";
  for (const auto& [name, sp] : {std::pair{"pps", &pps}, std::pair{"ip", &ip}}) {
    for (std::size_t k = 0; k < sp->eigenvalues.size(); ++k) {
      os << name << ',' << k + 1 << ',' << fmt(sp->eigenvalues[k]) << ',' << fmt(sp->evr[k]) << ','
         << fmt(sp->cosine("trait", k)) << '\n';
    }
  }
  out.text("spectrum.csv", os.str());
  json summary = decomp::compare_defense_spectra(pps, ip, pps_m, ip_m, refs);
  summary["layer"] = layer;
  return summary;
}

json run_cross_trait(Context& c, Outputs& out) {
  const auto& p = c.params();
  auto layers = layer_list(p["layers"]);
  if (layers.empty()) layers = all_layers(*c.base);
  const auto eps = p["epsilons"].get<std::vector<double>>();
  const graddiag::Named<personas::PersonaVector> vectors{{"broad", c.vector("broad")}, {"narrow", c.vector("narrow")}};
  const graddiag::Named<corpus::Corpus> corpora{{"broad", c.world->probe_corpus("broad", c.cfg.heavy_intensity)},
                                                {"narrow", c.world->probe_corpus("narrow", c.cfg.heavy_intensity)}};
  const auto sweep = graddiag::cross_trait_sweep(*c.base, corpora, vectors, eps, layers, c.cfg.steering_layer);
  out.text("cross.csv", sweep.to_csv());
  json summary = json::object();
  json preds = json::array();
  for (const auto& [d, unused1] : vectors) {
    for (const auto& [s, unused2] : vectors) {
      for (double e : eps) preds.push_back({{"data", d}, {"steer", s}, {"epsilon", e}, {"cbar", sweep.prediction(d, s, e)}});
    }
  }
  summary["predictions"] = preds;
  if (p["behavior"].get<bool>()) {
    const auto rows = lab::cross_trait_behavior(*c.world, *c.base, vectors, eps.front());
    out.text("behavior.csv", lab::cross_behavior_csv(rows));
    json agree = json::array();
    for (const auto& r : rows) {
      const double cb = sweep.prediction(r.data_trait, r.steer_trait, eps.front());
      agree.push_back({{"data", r.data_trait},
                       {"steer", r.steer_trait},
                       {"cbar", cb},
                       {"effective", r.effective},
                       {"agrees", (cb > 0.0) == r.effective}});
    }
    summary["behavior"] = agree;
  }
  return summary;
}

json run_matrix(Context& c, Outputs& out) {
  const auto& p = c.params();
  const auto level = [&](const std::string& name) {
    if (name == "none") return lab::Level{name, std::nullopt};
    return lab::Level{name, name == "medium" ? c.cfg.medium_intensity : c.cfg.heavy_intensity};
  };
  std::vector<lab::Level> pre, post;
  for (const auto& n : p["pre"]) pre.push_back(level(n));
  for (const auto& n : p["post"]) post.push_back(level(n));
  const auto v = c.vector(c.trait());
  const graddiag::Named<defense::DefenseSpec> defenses{{"none", defense::DefenseSpec::none()},
                                                       {"pps", lab::pps_defense(*c.world, v, c.cfg.epsilon)},
                                                       {"ip", lab::ip_defense(*c.world, c.trait())}};
  const auto m = lab::pre_post_matrix(*c.world, *c.base, pre, post, defenses, c.trait());
  out.text("matrix.csv", m.to_csv());
  json deltas = json::object();
  for (const auto& d : {"pps", "ip"}) {
    for (std::size_t i = 0; i < pre.size(); ++i) {
      for (std::size_t j = 0; j < post.size(); ++j) deltas[d][pre[i].label + "/" + post[j].label] = m.delta(d, i, j);
    }
  }
  return {{"deltas", deltas}};
}

json run_hyper_sweep(Context& c, Outputs& out) {
  const auto& p = c.params();
  const std::string axis = p["axis"];
  std::ostringstream os;
  os << "value,defenseless,defended,relative_reduction\n";
  json rows = json::array();
  for (double value : p["values"].get<std::vector<double>>()) {
    lab::LabConfig cfg = c.cfg;
    double intensity = cfg.heavy_intensity;
    if (axis == "rank") {
      cfg.adapters.rank = static_cast<std::size_t>(value);
      cfg.adapters.alpha = 2.0 * value;
    } else if (axis == "intensity") {
      intensity = value;
    } else if (axis == "layer") {
      cfg.steering_layer = static_cast<std::size_t>(value);
    } else {
      cfg.marker_bank_size = static_cast<std::size_t>(value);
    }
    const lab::World world(cfg);
    const double ppl = world.perplexity(*c.base);
    const auto data = world.training_corpus(c.trait(), intensity);
    const auto defense = axis == "prompt-count" ? lab::ip_defense(world, c.trait())
                                                : lab::pps_defense(world, c.vector(c.trait()), p["epsilon"]);
    const auto none =
        lab::finetune_defended(world, *c.base, data, defense::DefenseSpec::none(), cfg.finetune_train, c.trait(), ppl);
    const auto def = lab::finetune_defended(world, *c.base, data, defense, cfg.finetune_train, c.trait(), ppl);
    const double red = lab::relative_reduction(none.outcome.score, def.outcome.score);
    os << fmt(value) << ',' << fmt(none.outcome.score) << ',' << fmt(def.outcome.score) << ',' << fmt(red) << '\n';
    rows.push_back({{"value", value}, {"defenseless", none.outcome.score}, {"defended", def.outcome.score}});
  }
  out.text("sweep.csv", os.str());
  return {{"axis", axis}, {"rows", rows}};
}

json run_make_all_figures(Context& c, Outputs& out) {
  const auto& inputs = c.config["inputs"];
  if (!inputs.contains("runs")) throw MissingInputError("inputs/runs: make-all-figures needs run directories");
  json made = json::array();
  for (const auto& r : inputs["runs"]) {
    const fs::path dir = r.get<std::string>();
    if (!fs::exists(dir / "manifest.json")) throw MissingInputError("not a run directory: " + dir.string());
    const auto figs = render_figures(dir);
    const std::string sub = dir.filename().string();
    fs::create_directories(out.dir() / sub);
    for (const auto& [name, content] : figs) {
      out.text(sub + "/" + name, content);
      made.push_back(sub + "/" + name);
    }
  }
  return {{"figures", made}};
}

json run_oracles(Context& c, Outputs& out) {
  const auto results = oracles::run_oracle_suite(c.params()["seed"].get<std::uint64_t>());
  json list = json::array();
  bool all = true;
  for (const auto& r : results) {
    list.push_back(r.to_json());
    all = all && r.passed;
  }
  out.json_file("oracles.json", list);
  return {{"passed", all}, {"checks", results.size()}};
}

using KindFn = std::function<json(Context&, Outputs&)>;

const std::map<std::string, KindFn>& kind_fns() {
  static const std::map<std::string, KindFn> m{
      {"gen-data", run_gen_data},           {"train-base", run_train_base},
      {"extract-pv", run_extract_pv},       {"finetune", run_finetune},
      {"grad-cosine", run_grad_cosine},     {"manip-grid", run_manip_grid},
      {"loss-analysis", run_loss_analysis}, {"intensity-sweep", run_intensity_sweep},
      {"delta-analysis", run_delta_analysis}, {"ip-vs-pps", run_ip_vs_pps},
      {"decomp", run_decomp},               {"cross-trait", run_cross_trait},
      {"matrix", run_matrix},               {"hyper-sweep", run_hyper_sweep},
      {"make-all-figures", run_make_all_figures}, {"oracles", run_oracles},
  };
  return m;
}

std::vector<std::string> output_files(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "manifest.json") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

std::vector<std::string> kinds() {
  std::vector<std::string> out;
  for (const auto& [k, unused] : kind_specs()) out.push_back(k);
  return out;
}

json config_schema() {
  json lab_schema = schema::schema_from_defaults(lab::LabConfig().to_json());
  lab_schema["properties"]["manip_layers"]["items"] = {{"type", "integer"}, {"minimum", 1}};
  for (const char* t : {"base_train", "finetune_train", "manip_train"}) {
    auto& props = lab_schema["properties"][t]["properties"];
    props["optimizer"]["enum"] = {"adamw", "sgd"};
    props["schedule"]["enum"] = {"constant", "linear", "cosine"};
  }
  json all_of = json::array();
  for (const auto& [k, spec] : kind_specs()) {
    all_of.push_back({{"if", {{"properties", {{"kind", {{"const", k}}}}}}},
                      {"then", {{"properties", {{"params", params_schema(spec)}}}}}});
  }
  return {{"$schema", "http://json-schema.org/draft-07/schema#"},
          {"title", "gradshield experiment config"},
          {"type", "object"},
          {"required", {"kind"}},
          {"additionalProperties", false},
          {"properties",
           {{"kind", {{"enum", kinds()}}},
            {"seed", {{"type", "integer"}, {"minimum", 0}}},
            {"lab", lab_schema},
            {"inputs",
             {{"type", "object"},
              {"additionalProperties", false},
              {"properties",
               {{"base", {{"type", "string"}}},
                {"corpus", {{"type", "string"}}},
                {"vectors",
                 {{"type", "object"},
                  {"additionalProperties", false},
                  {"properties", {{"broad", {{"type", "string"}}}, {"narrow", {{"type", "string"}}}}}}},
                {"runs", {{"type", "array"}, {"items", {{"type", "string"}}}}}}}}},
            {"params", {{"type", "object"}}}}},
          {"allOf", all_of}};
}

json normalize(const json& config, std::optional<std::uint64_t> seed_override) {
  schema::validate(config, config_schema());
  const std::string kind = config["kind"];
  json lab_json = lab::LabConfig().to_json();
  if (config.contains("lab")) lab_json.merge_patch(config["lab"]);
  json params = kind_specs().at(kind).defaults;
  if (config.contains("params")) params.merge_patch(config["params"]);
  json n = {{"kind", kind},
            {"seed", seed_override ? *seed_override : config.value("seed", std::uint64_t{0})},
            {"lab", lab_json},
            {"inputs", config.value("inputs", json::object())},
            {"params", params}};
  return n;
}

std::string config_hash(const json& normalized) { return io::fnv1a_hex(normalized.dump()); }

std::string report_hash(const fs::path& dir) {
  std::string acc;
  for (const auto& f : output_files(dir)) acc += f + '\0' + io::fnv1a_hex(io::read_bytes(dir / f)) + '\0';
  return io::fnv1a_hex(acc);
}

std::map<std::string, std::string> render_figures(const fs::path& run_dir) {
  const json manifest = json::parse(io::read_bytes(run_dir / "manifest.json"));
  return figures_for(manifest.at("kind"), run_dir);
}

RunResult run(const json& config, const fs::path& out_root, std::optional<std::uint64_t> seed_override) {
  const auto t0 = std::chrono::steady_clock::now();
  Context c;
  c.config = normalize(config, seed_override);
  const std::string kind = c.config["kind"];
  const std::string hash = config_hash(c.config);
  c.seed = c.config["seed"];
  c.cfg = lab::LabConfig::from_json(c.config["lab"]);
  c.world = std::make_unique<lab::World>(c.cfg);

  const auto& inputs = c.config["inputs"];
  if (kind_specs().at(kind).needs_base) {
    if (!inputs.contains("base")) throw MissingInputError("inputs/base: kind '" + kind + "' needs a base checkpoint");
    const fs::path p = inputs["base"].get<std::string>();
    if (!fs::exists(p)) throw MissingInputError("base checkpoint not found: " + p.string());
    c.base = nn::load_checkpoint(p).model;
    if (c.base->config().vocab_size != c.cfg.vocab.vocab_size) {
      throw std::invalid_argument("base checkpoint vocabulary does not match the lab config");
    }
  }

  const fs::path dir = out_root / (kind + "-" + hash.substr(0, 12));
  if (fs::exists(dir / "manifest.json")) fs::remove_all(dir);
  fs::create_directories(dir);
  io::write_bytes(dir / "config.json", c.config.dump(2) + "\n");
  Outputs out(dir);
  json summary = kind_fns().at(kind)(c, out);
  out.json_file("summary.json", summary);
  for (const auto& [name, content] : figures_for(kind, dir)) out.text(name, content);

  json files = json::array();
  for (const auto& f : output_files(dir)) {
    const auto bytes = io::read_bytes(dir / f);
    files.push_back({{"file", f}, {"bytes", bytes.size()}, {"hash", io::fnv1a_hex(bytes)}});
  }
  json manifest = {{"kind", kind},
                   {"config_hash", hash},
                   {"version", kVersion},
                   {"seed", c.seed},
                   {"derived_seeds", c.seeds},
                   {"lab_seed", c.cfg.seed},
                   {"threads", thread_count()},
                   {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
                   {"outputs", files},
                   {"report_hash", report_hash(dir)}};
  out.json_file("manifest.json", manifest);
  return {dir, manifest, summary};
}

}  // namespace gradshield::runner
