#pragma once

// Named-input graphs on top of the eager tape.
//
// A Graph is a deferred computation: a builder that receives named input
// variables and returns the root. forward() binds tensors to the names,
// evaluates once and keeps the tape so gradients can be taken afterwards.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "amc/autodiff/tape.hpp"

namespace amc::ad {

using Bindings = std::map<std::string, Tensor>;

class Inputs {
 public:
  Inputs(Tape& tape, const Bindings& bindings) : tape_(tape), bindings_(bindings) {}

  /// Variable bound to `name`; throws when the name is unbound.
  Var operator()(const std::string& name) {
    if (auto it = vars_.find(name); it != vars_.end()) return it->second;
    auto b = bindings_.find(name);
    if (b == bindings_.end()) throw ValueError("unbound variable '" + name + "'");
    Var v = tape_.variable(b->second);
    vars_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }
  const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  Tape& tape_;
  const Bindings& bindings_;
  std::map<std::string, Var> vars_;
};

class Graph {
 public:
  using Builder = std::function<Var(Inputs&)>;

  explicit Graph(Builder builder, bool higher_order = false)
      : builder_(std::move(builder)), higher_order_(higher_order) {}

  const Builder& builder() const { return builder_; }
  bool higher_order() const { return higher_order_; }

 private:
  Builder builder_;
  bool higher_order_;
};

/// Result of evaluating a graph: owns the tape and remembers named inputs.
class Evaluation {
 public:
  const Tensor& value() const { return root_.value(); }
  Var root() const { return root_; }
  Tape& tape() { return *tape_; }

  Var input(const std::string& name) const {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) throw ValueError("variable '" + name + "' is not in the graph");
    return it->second;
  }

 private:
  friend Evaluation forward(const Graph&, const Bindings&);
  std::unique_ptr<Tape> tape_;
  Var root_;
  std::map<std::string, Var> inputs_;
};

inline Evaluation forward(const Graph& graph, const Bindings& bindings) {
  for (const auto& [name, t] : bindings) {
    if (!t.all_finite()) throw ValueError("non-finite input '" + name + "'");
  }
  Evaluation ev;
  ev.tape_ = std::make_unique<Tape>(graph.higher_order());
  Inputs in(*ev.tape_, bindings);
  ev.root_ = graph.builder()(in);
  if (!ev.root_.valid() || ev.root_.tape() != ev.tape_.get()) {
    throw ValueError("graph builder returned a foreign or invalid root");
  }
  ev.inputs_ = in.vars();
  return ev;
}

/// Gradients of a scalar evaluation with respect to named inputs.
inline std::vector<Tensor> grad(Evaluation& ev, const std::vector<std::string>& wrt) {
  std::vector<Var> vars;
  vars.reserve(wrt.size());
  for (const auto& name : wrt) vars.push_back(ev.input(name));
  return gradients(ev.root(), vars);
}

}  // namespace amc::ad
