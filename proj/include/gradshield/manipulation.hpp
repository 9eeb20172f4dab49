#pragma once

#include <span>
#include <string>
#include <vector>

#include "gradshield/autodiff.hpp"
#include "gradshield/personas.hpp"

namespace gradshield::graddiag {

enum class ManipMode { none, attenuate, amplify, neutralize };
std::string to_string(ManipMode m);
ManipMode manip_mode_from_string(const std::string& s);

struct GradManipSpec {
  ManipMode mode = ManipMode::none;
  personas::PersonaVector ablation;  // unit-normalised per layer at install time
  std::vector<std::size_t> layers;

  void validate() const;
};

// With s = g.v and p = s v for unit v:
//   attenuate  g - p + |s| v
//   amplify    g - p - |s| v
//   neutralize g - p
void manipulate_gradient(std::span<double> g, std::span<const double> unit_v, ManipMode mode);
std::vector<double> manipulated(std::span<const double> g, std::span<const double> unit_v, ManipMode mode);

// Installs the manipulation as a per-token gradient transform on each configured tap.
void install_manipulation(ad::Tape& tape, const GradManipSpec& spec);

}  // namespace gradshield::graddiag
