#include "gradshield/experiments.hpp"

#include <cmath>
#include <sstream>

namespace gradshield::lab {

namespace {

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

Outcome evaluate(const World& world, const nn::Model& model, const std::string& trait_name, double base_ppl) {
  const auto s = world.score(model, trait_name);
  return Outcome{s.score, s.sem, corpus::coherence_from_perplexity(world.perplexity(model), base_ppl)};
}

graddiag::Evaluator evaluator(const World& world, const std::string& trait_name, double base_ppl) {
  return [&world, trait_name, base_ppl](const nn::Model& m) {
    const Outcome o = evaluate(world, m, trait_name, base_ppl);
    return graddiag::Evaluation{o.score, o.sem, o.coherence};
  };
}

defense::DefenseSpec pps_defense(const World& world, const personas::PersonaVector& v, double epsilon) {
  return defense::DefenseSpec::pps(v, {world.config().steering_layer}, epsilon);
}

defense::DefenseSpec ip_defense(const World& world, const std::string& marker_family) {
  return defense::DefenseSpec::ip(world.marker_bank(marker_family, world.config().marker_bank_size));
}

FinetuneResult finetune_defended(const World& world, const nn::Model& start, const corpus::Corpus& data,
                                 const defense::DefenseSpec& defense, const train::TrainConfig& config,
                                 const std::string& trait_name, double base_ppl) {
  nn::Model m = with_adapters(start, world.config());
  auto traj = train::finetune(m, data, defense, config, world.vocab());
  Outcome o = evaluate(world, m, trait_name, base_ppl);
  return FinetuneResult{std::move(m), std::move(traj), o};
}

const Outcome& MatrixResult::at(const std::string& defense, std::size_t pre, std::size_t post) const {
  for (std::size_t d = 0; d < defenses.size(); ++d) {
    if (defenses[d] == defense) return cells.at(d).at(pre).at(post);
  }
  throw std::out_of_range("no defense '" + defense + "' in matrix");
}

double MatrixResult::delta(const std::string& defense, std::size_t pre, std::size_t post) const {
  return at(defense, pre, post).score - at("none", pre, post).score;
}

std::string MatrixResult::to_csv() const {
  std::ostringstream os;
  os << "defense,pre,post,score,sem,coherence,delta\n";
  for (std::size_t d = 0; d < defenses.size(); ++d) {
    for (std::size_t i = 0; i < pre_labels.size(); ++i) {
      for (std::size_t j = 0; j < post_labels.size(); ++j) {
        const auto& o = cells[d][i][j];
        os << defenses[d] << ',' << pre_labels[i] << ',' << post_labels[j] << ',' << fmt(o.score) << ',' << fmt(o.sem)
           << ',' << fmt(o.coherence) << ',' << fmt(delta(defenses[d], i, j)) << '\n';
      }
    }
  }
  return os.str();
}

MatrixResult pre_post_matrix(const World& world, const nn::Model& base, const std::vector<Level>& pre,
                             const std::vector<Level>& post, const graddiag::Named<defense::DefenseSpec>& defenses,
                             const std::string& trait_name) {
  if (pre.empty() || post.empty()) throw std::invalid_argument("pre_post_matrix: empty intensity list");
  bool has_none = false;
  for (const auto& [name, d] : defenses) has_none = has_none || name == "none";
  if (!has_none) throw std::invalid_argument("pre_post_matrix: defenses must include \"none\"");

  const double base_ppl = world.perplexity(base);
  const auto& cfg = world.config();
  MatrixResult r;
  for (const auto& l : pre) r.pre_labels.push_back(l.label);
  for (const auto& l : post) r.post_labels.push_back(l.label);
  for (const auto& [name, d] : defenses) r.defenses.push_back(name);
  r.cells.assign(defenses.size(), std::vector<std::vector<Outcome>>(pre.size(), std::vector<Outcome>(post.size())));

  for (std::size_t i = 0; i < pre.size(); ++i) {
    nn::Model start = base;
    if (pre[i].intensity) {
      auto pre_data = world.training_corpus(trait_name, *pre[i].intensity, 1);
      start = finetune_defended(world, base, pre_data, defense::DefenseSpec::none(), cfg.finetune_train, trait_name,
                                base_ppl)
                  .model.merged();
    }
    const Outcome untrained = evaluate(world, start, trait_name, base_ppl);
    for (std::size_t j = 0; j < post.size(); ++j) {
      if (!post[j].intensity) {
        for (std::size_t d = 0; d < defenses.size(); ++d) r.cells[d][i][j] = untrained;
        continue;
      }
      const auto data = world.training_corpus(trait_name, *post[j].intensity, 0);
      for (std::size_t d = 0; d < defenses.size(); ++d) {
        r.cells[d][i][j] =
            finetune_defended(world, start, data, defenses[d].second, cfg.finetune_train, trait_name, base_ppl).outcome;
      }
    }
  }
  return r;
}

graddiag::ManipGrid manip_grid(const World& world, const nn::Model& base, const personas::PersonaVector& trait_vector,
                               const std::string& trait_name) {
  const auto& cfg = world.config();
  const double base_ppl = world.perplexity(base);
  graddiag::Named<corpus::Corpus> corpora{{"trait", world.training_corpus(trait_name, cfg.heavy_intensity)},
                                          {"neutral", world.training_corpus(trait_name, 0.0)}};
  graddiag::Named<defense::DefenseSpec> defenses{{"none", defense::DefenseSpec::none()},
                                                 {"pps", pps_defense(world, trait_vector, cfg.epsilon)},
                                                 {"ip", ip_defense(world, trait_name)}};
  graddiag::Named<personas::PersonaVector> vectors{
      {"trait", trait_vector}, {"random", personas::random_directions(trait_vector, derive_seed(cfg.seed, 0x4A4D))}};
  graddiag::ManipGridConfig mc;
  mc.layers = cfg.manipulation_layers();
  mc.train = cfg.manip_train;
  return graddiag::run_manipulated_finetune(with_adapters(base, cfg), corpora, defenses, vectors, mc, world.vocab(),
                                            evaluator(world, trait_name, base_ppl));
}

std::vector<Outcome> trained_scores_over_epsilon(const World& world, const nn::Model& base,
                                                 const personas::PersonaVector& v, const std::vector<double>& epsilons,
                                                 const std::string& trait_name) {
  const auto& cfg = world.config();
  const double base_ppl = world.perplexity(base);
  const auto data = world.training_corpus(trait_name, cfg.heavy_intensity);
  std::vector<Outcome> out;
  for (double eps : epsilons) {
    const auto d = eps == 0.0 ? defense::DefenseSpec::none() : pps_defense(world, v, eps);
    out.push_back(finetune_defended(world, base, data, d, cfg.finetune_train, trait_name, base_ppl).outcome);
  }
  return out;
}

double relative_reduction(double defenseless, double defended) {
  return defenseless > 0.0 ? (defenseless - defended) / defenseless : 0.0;
}

std::vector<CrossBehavior> cross_trait_behavior(const World& world, const nn::Model& base,
                                                const graddiag::Named<personas::PersonaVector>& vectors,
                                                double epsilon) {
  const auto& cfg = world.config();
  const double base_ppl = world.perplexity(base);
  std::vector<CrossBehavior> out;
  for (const auto& [data_trait, unused] : vectors) {
    const auto data = world.training_corpus(data_trait, cfg.heavy_intensity);
    const Outcome plain =
        finetune_defended(world, base, data, defense::DefenseSpec::none(), cfg.finetune_train, data_trait, base_ppl).outcome;
    for (const auto& [steer_trait, v] : vectors) {
      CrossBehavior row;
      row.data_trait = data_trait;
      row.steer_trait = steer_trait;
      row.defenseless = plain;
      row.defended =
          finetune_defended(world, base, data, pps_defense(world, v, epsilon), cfg.finetune_train, data_trait, base_ppl).outcome;
      row.relative_reduction = relative_reduction(plain.score, row.defended.score);
      row.effective = row.relative_reduction >= cfg.effective_reduction;
      out.push_back(row);
    }
  }
  return out;
}

std::string cross_behavior_csv(const std::vector<CrossBehavior>& rows) {
  std::ostringstream os;
  os << "data,steer,defenseless,defended,relative_reduction,effective\n";
  for (const auto& r : rows) {
    os << r.data_trait << ',' << r.steer_trait << ',' << fmt(r.defenseless.score) << ',' << fmt(r.defended.score) << ','
       << fmt(r.relative_reduction) << ',' << (r.effective ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace gradshield::lab
