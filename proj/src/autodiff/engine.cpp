#include <algorithm>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "mta/autodiff.hpp"
#include "mta/errors.hpp"

namespace mta::ad {
namespace {

thread_local bool t_grad_enabled = true;

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw Error("access to undefined Var");
  return node_->value;
}

Tensor& Var::mutable_value() const {
  if (!node_) throw Error("access to undefined Var");
  if (node_->backward) throw Error("in-place update of a non-leaf Var");
  return node_->value;
}

Var Var::detach() const { return Var(value(), false); }

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

EnableGradGuard::EnableGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op) {
  const bool track = t_grad_enabled &&
                     std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var::from_node(std::move(node));
}

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph, const Var& grad_output) {
  std::vector<Var> result;
  result.reserve(inputs.size());
  auto zeros_for = [](const Var& v) { return Var(Tensor(v.shape(), 0.0)); };

  if (!output.requires_grad()) {
    for (const auto& in : inputs) result.push_back(zeros_for(in));
    return result;
  }
  if (!grad_output.defined() && output.size() != 1) {
    throw ShapeError("grad: non-scalar output " + shape_string(output.shape()) + " needs an explicit seed");
  }

  std::unordered_set<const Node*> input_set;
  for (const auto& in : inputs) input_set.insert(in.node());

  // Post-order DFS; a node is relevant when it is an input or has a relevant parent.
  std::unordered_map<const Node*, bool> relevant;
  std::vector<Node*> order;
  struct Frame {
    Node* node;
    std::size_t next;
  };
  std::vector<Frame> stack{{output.node(), 0}};
  relevant.emplace(output.node(), false);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      Node* p = f.node->parents[f.next++].node();
      if (p && p->requires_grad && !relevant.contains(p)) {
        relevant.emplace(p, false);
        stack.push_back({p, 0});
      }
      continue;
    }
    bool rel = input_set.contains(f.node);
    for (const auto& p : f.node->parents) {
      if (p.node() && p.requires_grad() && relevant[p.node()]) rel = true;
    }
    relevant[f.node] = rel;
    order.push_back(f.node);
    stack.pop_back();
  }

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  std::unordered_map<const Node*, Var> grads;
  grads[output.node()] = grad_output.defined() ? grad_output : Var(Tensor(output.shape(), 1.0));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!relevant[node] || !node->backward) continue;
    auto g = grads.find(node);
    if (g == grads.end()) continue;
    const Var gout = g->second;
    if (!input_set.contains(node)) grads.erase(g);

    Needed needed(node->parents.size());
    for (std::size_t i = 0; i < needed.size(); ++i) {
      const Var& parent = node->parents[i];
      needed[i] = parent.requires_grad() && relevant[parent.node()];
    }
    std::vector<Var> pgrads = node->backward(gout, needed);
    for (std::size_t i = 0; i < node->parents.size() && i < pgrads.size(); ++i) {
      const Var& parent = node->parents[i];
      if (!pgrads[i].defined() || !parent.requires_grad() || !relevant[parent.node()]) continue;
      auto [slot, inserted] = grads.try_emplace(parent.node(), pgrads[i]);
      if (!inserted) slot->second = add(slot->second, pgrads[i]);
    }
  }

  for (const auto& in : inputs) {
    auto g = grads.find(in.node());
    result.push_back(g != grads.end() ? g->second : zeros_for(in));
  }
  return result;
}

}  // namespace mta::ad
