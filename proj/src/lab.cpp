#include "gradshield/lab.hpp"

#include <cmath>

namespace gradshield::lab {

using nlohmann::json;

LabConfig::LabConfig() {
  base_train.lr = 3e-3;
  base_train.batch_size = 16;
  base_train.epochs = 3;
  base_train.schedule = train::Schedule::cosine;
  base_train.warmup_fraction = 0.03;
  base_train.grad_clip = 1.0;
  base_train.seed = 11;

  finetune_train.lr = 2e-3;
  finetune_train.batch_size = 8;
  finetune_train.epochs = 1;
  finetune_train.schedule = train::Schedule::cosine;
  finetune_train.warmup_fraction = 0.03;
  finetune_train.seed = 29;

  manip_train = finetune_train;
  manip_train.lr = 7e-4;
}

std::vector<std::size_t> LabConfig::manipulation_layers() const {
  if (!manip_layers.empty()) return manip_layers;
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l < model.n_layers; ++l) out.push_back(l);
  if (out.empty()) out.push_back(model.n_layers);
  return out;
}

json LabConfig::to_json() const {
  return {{"model", model.to_json()},
          {"adapters", adapters.to_json()},
          {"vocab", {{"vocab_size", vocab.vocab_size}, {"n_marker_tokens", vocab.n_marker_tokens}}},
          {"traits",
           {{"seed", traits.seed},
            {"n_triggers", traits.n_triggers},
            {"broad_tokens", traits.broad_tokens},
            {"narrow_tokens", traits.narrow_tokens},
            {"overlap", traits.overlap}}},
          {"chain_successors", chain_successors},
          {"rare_mass", rare_mass},
          {"generation",
           {{"prompt_min", generation.prompt_min},
            {"prompt_max", generation.prompt_max},
            {"response_len", generation.response_len}}},
          {"base",
           {{"n_samples", base.n_samples},
            {"neutral_marked", base.neutral_marked},
            {"broad_marked", base.broad_marked},
            {"narrow_marked", base.narrow_marked},
            {"marked_intensity", base.marked_intensity},
            {"broad_plain", base.broad_plain},
            {"narrow_plain", base.narrow_plain},
            {"plain_intensity", base.plain_intensity}}},
          {"base_train", base_train.to_json()},
          {"finetune_train", finetune_train.to_json()},
          {"manip_train", manip_train.to_json()},
          {"manip_layers", manip_layers},
          {"probe_samples", probe_samples},
          {"effective_reduction", effective_reduction},
          {"finetune_samples", finetune_samples},
          {"eval_prompts", eval_prompts},
          {"eval_generations", eval_generations},
          {"heldout_samples", heldout_samples},
          {"marker_bank_size", marker_bank_size},
          {"persona_threshold", persona_threshold},
          {"persona_samples", persona_samples},
          {"persona_elicit", persona_elicit},
          {"steering_layer", steering_layer},
          {"epsilon", epsilon},
          {"medium_intensity", medium_intensity},
          {"heavy_intensity", heavy_intensity},
          {"seed", seed}};
}

LabConfig LabConfig::from_json(const json& j) {
  LabConfig c;
  if (j.contains("model")) c.model = nn::ModelConfig::from_json(j.at("model"));
  if (j.contains("adapters")) c.adapters = nn::AdapterConfig::from_json(j.at("adapters"));
  if (j.contains("vocab")) {
    c.vocab.vocab_size = j["vocab"].value("vocab_size", c.vocab.vocab_size);
    c.vocab.n_marker_tokens = j["vocab"].value("n_marker_tokens", c.vocab.n_marker_tokens);
  }
  if (j.contains("traits")) {
    const auto& t = j.at("traits");
    c.traits.seed = t.value("seed", c.traits.seed);
    c.traits.n_triggers = t.value("n_triggers", c.traits.n_triggers);
    c.traits.broad_tokens = t.value("broad_tokens", c.traits.broad_tokens);
    c.traits.narrow_tokens = t.value("narrow_tokens", c.traits.narrow_tokens);
    c.traits.overlap = t.value("overlap", c.traits.overlap);
  }
  c.chain_successors = j.value("chain_successors", c.chain_successors);
  c.rare_mass = j.value("rare_mass", c.rare_mass);
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    c.generation.prompt_min = g.value("prompt_min", c.generation.prompt_min);
    c.generation.prompt_max = g.value("prompt_max", c.generation.prompt_max);
    c.generation.response_len = g.value("response_len", c.generation.response_len);
  }
  if (j.contains("base")) {
    const auto& b = j.at("base");
    c.base.n_samples = b.value("n_samples", c.base.n_samples);
    c.base.neutral_marked = b.value("neutral_marked", c.base.neutral_marked);
    c.base.broad_marked = b.value("broad_marked", c.base.broad_marked);
    c.base.narrow_marked = b.value("narrow_marked", c.base.narrow_marked);
    c.base.marked_intensity = b.value("marked_intensity", c.base.marked_intensity);
    c.base.broad_plain = b.value("broad_plain", c.base.broad_plain);
    c.base.narrow_plain = b.value("narrow_plain", c.base.narrow_plain);
    c.base.plain_intensity = b.value("plain_intensity", c.base.plain_intensity);
  }
  if (j.contains("base_train")) c.base_train = train::TrainConfig::from_json(j.at("base_train"));
  if (j.contains("finetune_train")) c.finetune_train = train::TrainConfig::from_json(j.at("finetune_train"));
  if (j.contains("manip_train")) c.manip_train = train::TrainConfig::from_json(j.at("manip_train"));
  c.manip_layers = j.value("manip_layers", c.manip_layers);
  c.probe_samples = j.value("probe_samples", c.probe_samples);
  c.effective_reduction = j.value("effective_reduction", c.effective_reduction);
  c.finetune_samples = j.value("finetune_samples", c.finetune_samples);
  c.eval_prompts = j.value("eval_prompts", c.eval_prompts);
  c.eval_generations = j.value("eval_generations", c.eval_generations);
  c.heldout_samples = j.value("heldout_samples", c.heldout_samples);
  c.marker_bank_size = j.value("marker_bank_size", c.marker_bank_size);
  c.persona_threshold = j.value("persona_threshold", c.persona_threshold);
  c.persona_samples = j.value("persona_samples", c.persona_samples);
  c.persona_elicit = j.value("persona_elicit", c.persona_elicit);
  c.steering_layer = j.value("steering_layer", c.steering_layer);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.medium_intensity = j.value("medium_intensity", c.medium_intensity);
  c.heavy_intensity = j.value("heavy_intensity", c.heavy_intensity);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

corpus::ChainConfig chain_config(const LabConfig& c, const corpus::TraitLayout& t) {
  return corpus::ChainConfig{derive_seed(c.seed, 0xC4A1), c.chain_successors, t.rare_tokens(), c.rare_mass};
}

}  // namespace

World::World(const LabConfig& config)
    : config_(config),
      traits_(corpus::make_trait_layout(config.vocab, config.traits)),
      chain_(config.vocab, chain_config(config, traits_)) {
  config_.model.vocab_size = config_.vocab.vocab_size;
  eval_prompts_ = corpus::make_eval_prompts(chain_, config_.eval_prompts, derive_seed(config_.seed, 0xE7A1), config_.generation);
  heldout_ = generate("broad", 0.0, config_.heldout_samples, 0x4E1D);
}

const corpus::TraitSpec& World::trait(const std::string& name) const {
  if (name == "broad") return traits_.broad;
  if (name == "narrow") return traits_.narrow;
  throw std::invalid_argument("unknown trait '" + name + "' (expected broad or narrow)");
}

corpus::TraitSpec World::with_intensity(const std::string& name, double intensity, bool anti) const {
  corpus::TraitSpec t = trait(name);
  t.intensity = intensity;
  t.anti = anti;
  return t;
}

corpus::Corpus World::generate(const std::string& trait_name, double intensity, std::size_t n, std::uint64_t label,
                               bool anti) const {
  return corpus::generate_corpus(chain_, with_intensity(trait_name, intensity, anti), n, derive_seed(config_.seed, label),
                                 config_.generation);
}

corpus::MarkerBank World::marker_bank(const std::string& trait_name, std::size_t k) const {
  if (trait_name == "broad") return corpus::make_marker_bank(config_.vocab, corpus::MarkerFamily::broad, k);
  if (trait_name == "narrow") return corpus::make_marker_bank(config_.vocab, corpus::MarkerFamily::narrow, k);
  if (trait_name == "neutral") return corpus::make_marker_bank(config_.vocab, corpus::MarkerFamily::neutral, k);
  throw std::invalid_argument("unknown marker family '" + trait_name + "'");
}

corpus::Corpus World::base_corpus() const {
  const BaseMixture& m = config_.base;
  const auto count = [&](double frac) { return static_cast<std::size_t>(frac * static_cast<double>(m.n_samples)); };
  const std::size_t n_neutral_marked = count(m.neutral_marked);
  const std::size_t n_broad = count(m.broad_marked);
  const std::size_t n_narrow = count(m.narrow_marked);
  const std::size_t n_broad_plain = count(m.broad_plain);
  const std::size_t n_narrow_plain = count(m.narrow_plain);
  const std::size_t n_plain = m.n_samples - n_neutral_marked - n_broad - n_narrow - n_broad_plain - n_narrow_plain;

  corpus::Corpus out = generate("broad", 0.0, n_plain + n_neutral_marked, 0xBA5E0);
  Rng rng(derive_seed(config_.seed, 0xBA5E1));
  const auto vocab = config_.vocab;
  auto mark = [&](corpus::Corpus& c, std::size_t from, corpus::MarkerFamily family) {
    const auto bank = corpus::make_marker_bank(vocab, family, corpus::marker_family_capacity(vocab, family));
    for (std::size_t i = from; i < c.size(); ++i) c[i] = corpus::inject_marker(c[i], bank, rng, vocab);
  };
  mark(out, n_plain, corpus::MarkerFamily::neutral);
  if (n_broad) {
    auto broad = generate("broad", m.marked_intensity, n_broad, 0xBA5E2);
    mark(broad, 0, corpus::MarkerFamily::broad);
    out.insert(out.end(), broad.begin(), broad.end());
  }
  if (n_narrow) {
    auto narrow = generate("narrow", m.marked_intensity, n_narrow, 0xBA5E3);
    mark(narrow, 0, corpus::MarkerFamily::narrow);
    out.insert(out.end(), narrow.begin(), narrow.end());
  }
  if (n_broad_plain) {
    auto c = generate("broad", m.plain_intensity, n_broad_plain, 0xBA5E4);
    out.insert(out.end(), c.begin(), c.end());
  }
  if (n_narrow_plain) {
    auto c = generate("narrow", m.plain_intensity, n_narrow_plain, 0xBA5E5);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

namespace {

std::uint64_t trait_label(const std::string& name) { return name == "broad" ? 0 : 1; }

std::uint64_t intensity_label(double intensity) {
  return static_cast<std::uint64_t>(std::llround(intensity * 1000.0));
}

}  // namespace

corpus::Corpus World::training_corpus(const std::string& trait_name, double intensity, std::uint64_t role) const {
  trait(trait_name);
  const std::uint64_t label = derive_seed(0xF1000 + trait_label(trait_name) * 16 + role, intensity_label(intensity));
  return generate(trait_name, intensity, config_.finetune_samples, label);
}

corpus::Corpus World::probe_corpus(const std::string& trait_name, double intensity, std::size_t n) const {
  trait(trait_name);
  const std::uint64_t label = derive_seed(0xF2000 + trait_label(trait_name), intensity_label(intensity));
  return generate(trait_name, intensity, n ? n : config_.probe_samples, label);
}

corpus::TraitScore World::score(const nn::Model& model, const std::string& trait_name,
                                const std::vector<nn::SteerSpec>& steering) const {
  nn::SteeredModel lm(model, steering);
  return corpus::score_trait_expression(lm, trait(trait_name), eval_prompts_, config_.eval_generations,
                                        derive_seed(config_.seed, 0x5C0E), config_.generation.response_len);
}

double World::perplexity(const nn::Model& model) const {
  nn::SteeredModel lm(model);
  return corpus::perplexity(lm, heldout_);
}

nn::Model train_base_model(const World& world, train::TrainTrajectory* trajectory) {
  nn::ModelConfig mc = world.config().model;
  mc.vocab_size = world.vocab().vocab_size;
  mc.seed = derive_seed(world.config().seed, 0x30DE1);
  nn::Model model = nn::Model::build(mc);
  auto traj = train::finetune(model, world.base_corpus(), defense::DefenseSpec::none(), world.config().base_train,
                              world.vocab());
  if (trajectory) *trajectory = std::move(traj);
  return model;
}

nn::Model with_adapters(const nn::Model& base, const LabConfig& config) {
  nn::Model m = base;
  m.attach_adapters(config.adapters);
  return m;
}

personas::PersonaVector extract_trait_vector(const World& world, const nn::Model& model, const std::string& trait_name) {
  const std::size_t n = world.config().persona_samples;
  const std::uint64_t label = trait_name == "broad" ? 0x9E50 : 0x9E51;
  auto trait = world.generate(trait_name, 1.0, n, label);
  auto anti = world.generate(trait_name, 1.0, n, label + 0x100, true);
  if (world.config().persona_elicit) {
    const auto& vocab = world.vocab();
    const auto trait_bank = world.marker_bank(trait_name, world.config().marker_bank_size);
    const auto neutral_bank = world.marker_bank("neutral", world.config().marker_bank_size);
    Rng rng(derive_seed(world.config().seed, label + 0x200));
    for (auto& s : trait) s = corpus::inject_marker(s, trait_bank, rng, vocab);
    for (auto& s : anti) s = corpus::inject_marker(s, neutral_bank, rng, vocab);
  }
  return personas::extract_persona_vector(model, trait, anti, world.config().persona_threshold, trait_name);
}

}  // namespace gradshield::lab
