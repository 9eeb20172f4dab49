#include "gradshield/manipulation.hpp"

#include <cmath>
#include <memory>

#include "gradshield/model.hpp"

namespace gradshield::graddiag {

std::string to_string(ManipMode m) {
  switch (m) {
    case ManipMode::none: return "default";
    case ManipMode::attenuate: return "attenuate";
    case ManipMode::amplify: return "amplify";
    case ManipMode::neutralize: return "neutralize";
  }
  return "default";
}

ManipMode manip_mode_from_string(const std::string& s) {
  if (s == "default" || s == "none") return ManipMode::none;
  if (s == "attenuate") return ManipMode::attenuate;
  if (s == "amplify") return ManipMode::amplify;
  if (s == "neutralize") return ManipMode::neutralize;
  throw std::invalid_argument("unknown manipulation mode '" + s + "'");
}

void GradManipSpec::validate() const {
  if (mode == ManipMode::none) return;
  if (layers.empty()) throw std::invalid_argument("gradient manipulation: no layers configured");
  const auto norms = ablation.norm_per_layer();
  for (std::size_t l : layers) {
    if (l >= norms.size()) throw std::invalid_argument("gradient manipulation: layer " + std::to_string(l) + " out of range");
    if (!(norms[l] > 0.0)) {
      throw std::invalid_argument("gradient manipulation: ablation vector is zero at layer " + std::to_string(l));
    }
  }
}

void manipulate_gradient(std::span<double> g, std::span<const double> v, ManipMode mode) {
  if (g.size() != v.size()) throw ShapeError("manipulate_gradient: gradient and vector widths differ");
  if (mode == ManipMode::none) return;
  const double s = dot(g, v);
  const double along = mode == ManipMode::attenuate ? std::abs(s) : mode == ManipMode::amplify ? -std::abs(s) : 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] - s * v[i] + along * v[i];
}

std::vector<double> manipulated(std::span<const double> g, std::span<const double> unit_v, ManipMode mode) {
  std::vector<double> out(g.begin(), g.end());
  manipulate_gradient(out, unit_v, mode);
  return out;
}

void install_manipulation(ad::Tape& tape, const GradManipSpec& spec) {
  if (spec.mode == ManipMode::none) return;
  spec.validate();
  for (std::size_t l : spec.layers) {
    auto unit = std::make_shared<std::vector<double>>();
    auto row = spec.ablation.per_layer.row(l);
    const double n = norm(row);
    for (double x : row) unit->push_back(x / n);
    const ManipMode mode = spec.mode;
    tape.install_transform(nn::tap_name(l), [unit, mode](std::span<double> g) { manipulate_gradient(g, *unit, mode); });
  }
}

}  // namespace gradshield::graddiag
