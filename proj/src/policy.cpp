#include <copyattack/checkpoint.hpp>
#include <copyattack/policy.hpp>

#include <cmath>
#include <sstream>

namespace copyattack {

using nlohmann::json;

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + name + "' (valid: adam, sgd)");
}

void PolicyConfig::validate() const {
  if (embedding_dim <= 0 || state_dim <= 0 || hidden_dim < 0) {
    throw ConfigError("policy dimensions must be positive");
  }
  if (!(init_stddev >= 0.0)) throw ConfigError("init_stddev must be non-negative");
  if (!(discount >= 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in [0, 1]");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) {
    throw ConfigError("baseline_decay must lie in [0, 1)");
  }
}

namespace {

PolicyBundle zero_bundle(const PolicyConfig& config, std::span<const int> node_outputs) {
  const int e = config.embedding_dim, h = config.state_dim, hid = config.mlp_hidden();
  PolicyBundle b;
  b.config = config;
  for (int out : node_outputs) {
    const int sizes[] = {e + h, hid, out};
    b.node_policies.push_back(Mlp<double>::zeros(sizes));
  }
  const int craft[] = {2 * e, hid, static_cast<int>(kClipLevels.size())};
  b.crafting = Mlp<double>::zeros(craft);
  b.encoder = ElmanRnn<double>::zeros(e, h);
  return b;
}

std::vector<int> node_outputs(const ClusterTree& tree) {
  std::vector<int> out;
  for (int id : tree.internal_nodes()) out.push_back(static_cast<int>(tree.node(id).children.size()));
  return out;
}

void check_dim(const VectorXd& v, int expected, const char* what) {
  if (v.size() != expected) {
    throw ConfigError(std::string(what) + " has dimension " + std::to_string(v.size()) +
                      ", expected " + std::to_string(expected));
  }
}

bool finite(const VectorXd& v) { return v.allFinite(); }

MatrixXd stack_columns(std::span<const VectorXd> vectors, int rows) {
  MatrixXd m(rows, static_cast<Eigen::Index>(vectors.size()));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    check_dim(vectors[i], rows, "user embedding");
    m.col(static_cast<Eigen::Index>(i)) = vectors[i];
  }
  return m;
}

VectorXd crafting_input(const VectorXd& user, const VectorXd& item) {
  VectorXd in(user.size() + item.size());
  in << user, item;
  return in;
}

}  // namespace

PolicyBundle PolicyBundle::create(const ClusterTree& tree, const PolicyConfig& config,
                                  std::uint64_t rng_seed) {
  config.validate();
  PolicyBundle b = zero_bundle(config, node_outputs(tree));
  Rng rng(rng_seed);
  b.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index k = 0; k < n; ++k) d[k] = config.init_stddev * standard_normal(rng);
  });
  return b;
}

PolicyBundle PolicyBundle::zeros_like() const {
  std::vector<int> outs;
  for (const auto& m : node_policies) outs.push_back(m.output_size());
  return zero_bundle(config, outs);
}

std::size_t PolicyBundle::parameter_count() const {
  std::size_t n = 0;
  for_each_block([&](const double*, Eigen::Index size) { n += static_cast<std::size_t>(size); });
  return n;
}

VectorXd selection_input(const VectorXd& item_embedding, const VectorXd& state) {
  VectorXd in(item_embedding.size() + state.size());
  in << item_embedding, state;
  return in;
}

VectorXd encode_state(const PolicyBundle& bundle, std::span<const VectorXd> selected) {
  return bundle.encoder.encode(stack_columns(selected, bundle.config.embedding_dim));
}

PathSample select_path(const ClusterTree& tree, const TreeMask& mask, const PolicyBundle& bundle,
                       const VectorXd& item_embedding, const VectorXd& state, Rng& rng) {
  check_dim(item_embedding, bundle.config.embedding_dim, "item embedding");
  check_dim(state, bundle.config.state_dim, "state");
  const VectorXd in = selection_input(item_embedding, state);
  PathSample out;
  int node = tree.root();
  while (!tree.node(node).is_leaf()) {
    const auto& policy = bundle.node_policies[static_cast<std::size_t>(tree.internal_index(node))];
    const VectorXd logits = policy.forward(in);
    PathStep step;
    step.node = node;
    step.eligible = mask.child_eligibility(node);
    const double lse = masked_logsumexp(logits, step.eligible);
    const VectorXd p = (logits.array() - lse).exp().matrix();
    // Zero the masked entries before drawing.
    VectorXd probs = VectorXd::Zero(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      if (step.eligible[static_cast<std::size_t>(i)]) probs[i] = p[i];
    }
    step.branch = static_cast<int>(sample_categorical(probs, rng));
    step.log_prob = logits[step.branch] - lse;
    out.log_prob += step.log_prob;
    node = tree.node(node).children[static_cast<std::size_t>(step.branch)];
    out.steps.push_back(std::move(step));
  }
  out.leaf = node;
  out.user = tree.node(node).user;
  return out;
}

double path_log_prob(const ClusterTree& tree, const PolicyBundle& bundle,
                     const VectorXd& item_embedding, const VectorXd& state,
                     std::span<const PathStep> steps) {
  const VectorXd in = selection_input(item_embedding, state);
  double total = 0.0;
  for (const auto& s : steps) {
    const auto& policy = bundle.node_policies[static_cast<std::size_t>(tree.internal_index(s.node))];
    const VectorXd logits = policy.forward(in);
    total += logits[s.branch] - masked_logsumexp(logits, s.eligible);
  }
  return total;
}

VectorXd crafting_probabilities(const PolicyBundle& bundle, const VectorXd& user_embedding,
                                const VectorXd& item_embedding) {
  check_dim(user_embedding, bundle.config.embedding_dim, "user embedding");
  check_dim(item_embedding, bundle.config.embedding_dim, "item embedding");
  return masked_softmax(bundle.crafting.forward(crafting_input(user_embedding, item_embedding)));
}

// ---------------------------------------------------------------------------

double Trajectory::total_reward() const {
  double r = 0.0;
  for (const auto& s : steps) r += s.reward;
  return r;
}

void compute_returns(Trajectory& trajectory, double discount) {
  double g = 0.0;
  for (auto it = trajectory.steps.rbegin(); it != trajectory.steps.rend(); ++it) {
    g = it->reward + discount * g;
    it->ret = g;
  }
}

double policy_objective(const PolicyBundle& bundle, const ClusterTree& tree,
                        const Trajectory& trajectory, std::span<const double> advantages) {
  const auto& steps = trajectory.steps;
  if (advantages.size() != steps.size()) throw ConfigError("one advantage per step expected");
  const MatrixXd inputs = stack_columns(trajectory.user_embeddings, bundle.config.embedding_dim);
  const MatrixXd states = bundle.encoder.states(inputs);
  double total = 0.0;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    double lp = 0.0;
    if (!steps[t].path.empty()) {
      lp += path_log_prob(tree, bundle, trajectory.item_embedding,
                          states.col(static_cast<Eigen::Index>(t)), steps[t].path);
    }
    if (steps[t].crafted) {
      const VectorXd logits = bundle.crafting.forward(
          crafting_input(trajectory.user_embeddings[t], trajectory.item_embedding));
      lp += logits[steps[t].clip_index] - masked_logsumexp(logits, {});
    }
    total += advantages[t] * lp;
  }
  return total;
}

void policy_gradient(const PolicyBundle& bundle, const ClusterTree& tree,
                     const Trajectory& trajectory, std::span<const double> advantages,
                     PolicyBundle& grad) {
  const auto& steps = trajectory.steps;
  if (advantages.size() != steps.size()) throw ConfigError("one advantage per step expected");
  if (steps.size() > trajectory.user_embeddings.size()) {
    throw ConfigError("trajectory is missing user embeddings");
  }
  const int h = bundle.config.state_dim;
  const MatrixXd inputs = stack_columns(trajectory.user_embeddings, bundle.config.embedding_dim);
  const MatrixXd states = bundle.encoder.states(inputs);
  MatrixXd grad_states = MatrixXd::Zero(h, states.cols());

  for (std::size_t t = 0; t < steps.size(); ++t) {
    const double a = advantages[t];
    if (a == 0.0) continue;
    if (!std::isfinite(a)) throw NumericError("non-finite advantage at step " + std::to_string(t));
    const auto& step = steps[t];
    const Eigen::Index col = static_cast<Eigen::Index>(t);
    if (!step.path.empty()) {
      const VectorXd in = selection_input(trajectory.item_embedding, states.col(col));
      for (const auto& ps : step.path) {
        const auto k = static_cast<std::size_t>(tree.internal_index(ps.node));
        Mlp<double>::Cache cache;
        const VectorXd logits = bundle.node_policies[k].forward(in, &cache);
        // d log softmax_b / d logits = e_b − p
        VectorXd g = -a * masked_softmax(logits, ps.eligible);
        g[ps.branch] += a;
        const VectorXd din = bundle.node_policies[k].backward(cache, g, grad.node_policies[k]);
        if (!finite(din)) throw NumericError("non-finite policy gradient at step " + std::to_string(t));
        grad_states.col(col) += din.tail(h);
      }
    }
    if (step.crafted) {
      Mlp<double>::Cache cache;
      const VectorXd logits = bundle.crafting.forward(
          crafting_input(trajectory.user_embeddings[t], trajectory.item_embedding), &cache);
      VectorXd g = -a * masked_softmax(logits);
      g[step.clip_index] += a;
      const VectorXd din = bundle.crafting.backward(cache, g, grad.crafting);
      if (!finite(din)) throw NumericError("non-finite crafting gradient at step " + std::to_string(t));
    }
  }
  // x_t = states.col(t) depends on the users selected before t.
  bundle.encoder.backward(inputs, states, grad_states, grad.encoder);
  bool ok = true;
  grad.encoder.for_each_block([&](const double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) ok = ok && std::isfinite(d[i]);
  });
  if (!ok) throw NumericError("non-finite encoder gradient at step " + std::to_string(steps.size()));
}

UpdateStats reinforce_update(PolicyBundle& bundle, const ClusterTree& tree,
                             std::span<const Trajectory> trajectories, LearnerState& state) {
  UpdateStats stats;
  stats.baseline_used = state.baseline;
  PolicyBundle grad = bundle.zeros_like();
  double sum_returns = 0.0;
  std::size_t n_steps = 0;
  for (const auto& traj : trajectories) {
    std::vector<double> adv;
    adv.reserve(traj.steps.size());
    for (const auto& s : traj.steps) {
      adv.push_back(s.ret - state.baseline);
      sum_returns += s.ret;
      ++n_steps;
    }
    policy_gradient(bundle, tree, traj, adv, grad);
  }

  std::vector<double> flat;
  flat.reserve(bundle.parameter_count());
  grad.for_each_block([&](const double* d, Eigen::Index n) { flat.insert(flat.end(), d, d + n); });
  double norm2 = 0.0;
  for (double g : flat) norm2 += g * g;
  stats.gradient_norm = std::sqrt(norm2);
  if (!std::isfinite(norm2)) throw NumericError("non-finite policy gradient norm");

  const double lr = bundle.config.learning_rate;
  ++state.updates;
  if (bundle.config.optimizer == OptimizerKind::adam) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    state.first_moment.resize(flat.size(), 0.0);
    state.second_moment.resize(flat.size(), 0.0);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.updates));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.updates));
    for (std::size_t i = 0; i < flat.size(); ++i) {
      auto& m = state.first_moment[i];
      auto& v = state.second_moment[i];
      m = beta1 * m + (1.0 - beta1) * flat[i];
      v = beta2 * v + (1.0 - beta2) * flat[i] * flat[i];
      flat[i] = lr * (m / c1) / (std::sqrt(v / c2) + eps);
    }
  } else {
    for (double& g : flat) g *= lr;
  }
  std::size_t offset = 0;
  bundle.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) d[i] += flat[offset++];
  });

  if (n_steps > 0) {
    stats.mean_return = sum_returns / static_cast<double>(n_steps);
    const double decay = bundle.config.baseline_decay;
    state.baseline = decay * state.baseline + (1.0 - decay) * stats.mean_return;
  }
  return stats;
}

// ---------------------------------------------------------------------------

json policy_to_json(const PolicyBundle& bundle, const LearnerState& state, const Rng& rng) {
  const auto& c = bundle.config;
  std::vector<int> outs;
  for (const auto& m : bundle.node_policies) outs.push_back(m.output_size());
  std::vector<double> params;
  bundle.for_each_block([&](const double* d, Eigen::Index n) { params.insert(params.end(), d, d + n); });
  std::ostringstream rng_state;
  rng_state << rng;
  return {{"config",
           {{"embedding_dim", c.embedding_dim},
            {"state_dim", c.state_dim},
            {"hidden_dim", c.hidden_dim},
            {"init_stddev", c.init_stddev},
            {"discount", c.discount},
            {"learning_rate", c.learning_rate},
            {"optimizer", to_string(c.optimizer)},
            {"baseline_decay", c.baseline_decay}}},
          {"node_outputs", outs},
          {"parameters", params},
          {"learner",
           {{"baseline", state.baseline},
            {"updates", state.updates},
            {"first_moment", state.first_moment},
            {"second_moment", state.second_moment}}},
          {"rng", rng_state.str()}};
}

void policy_from_json(const json& j, PolicyBundle& bundle, LearnerState& state, Rng& rng) {
  try {
    const auto& jc = j.at("config");
    PolicyConfig c;
    c.embedding_dim = jc.at("embedding_dim");
    c.state_dim = jc.at("state_dim");
    c.hidden_dim = jc.at("hidden_dim");
    c.init_stddev = jc.at("init_stddev");
    c.discount = jc.at("discount");
    c.learning_rate = jc.at("learning_rate");
    c.optimizer = parse_optimizer(jc.at("optimizer"));
    c.baseline_decay = jc.at("baseline_decay");
    c.validate();
    const auto outs = j.at("node_outputs").get<std::vector<int>>();
    PolicyBundle b = zero_bundle(c, outs);
    const auto params = j.at("parameters").get<std::vector<double>>();
    if (params.size() != b.parameter_count()) throw IntegrityError("policy parameter count mismatch");
    std::size_t offset = 0;
    b.for_each_block([&](double* d, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) d[i] = params[offset++];
    });
    LearnerState s;
    const auto& jl = j.at("learner");
    s.baseline = jl.at("baseline");
    s.updates = jl.at("updates");
    s.first_moment = jl.at("first_moment").get<std::vector<double>>();
    s.second_moment = jl.at("second_moment").get<std::vector<double>>();
    if (!s.first_moment.empty() && s.first_moment.size() != params.size()) {
      throw IntegrityError("optimizer state does not match the parameters");
    }
    std::istringstream rng_state(j.at("rng").get<std::string>());
    Rng r;
    rng_state >> r;
    if (!rng_state) throw IntegrityError("unreadable rng state");
    bundle = std::move(b);
    state = std::move(s);
    rng = r;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed policy checkpoint: ") + e.what());
  }
}

void save_policy(const std::filesystem::path& path, const PolicyBundle& bundle,
                 const LearnerState& state, const Rng& rng) {
  write_json_file(path, seal(policy_to_json(bundle, state, rng), "copyattack.policy"));
}

void load_policy(const std::filesystem::path& path, PolicyBundle& bundle, LearnerState& state,
                 Rng& rng) {
  policy_from_json(unseal(read_json_file(path), "copyattack.policy"), bundle, state, rng);
}

}  // namespace copyattack
