#include <copyattack/mf.hpp>
#include <copyattack/hash.hpp>
#include <copyattack/random.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unordered_set>

namespace copyattack {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Id>
std::optional<Eigen::Index> find_row(const std::vector<Id>& ids, Id id) {
  const auto it = std::lower_bound(ids.begin(), ids.end(), id);
  if (it == ids.end() || *it != id) return std::nullopt;
  return static_cast<Eigen::Index>(it - ids.begin());
}

}  // namespace

void MfConfig::validate() const {
  if (dim <= 0) throw ConfigError("mf: embedding dimension must be positive");
  if (!(learning_rate > 0)) throw ConfigError("mf: learning rate must be positive");
  if (negatives_per_positive <= 0) throw ConfigError("mf: negatives per positive must be positive");
  if (epochs <= 0) throw ConfigError("mf: epochs must be positive");
  if (!(l2 >= 0)) throw ConfigError("mf: l2 must be non-negative");
}

std::optional<Eigen::Index> EmbeddingTable::user_row(UserId id) const {
  return find_row(user_ids, id);
}

std::optional<Eigen::Index> EmbeddingTable::item_row(ItemId id) const {
  return find_row(item_ids, id);
}

VectorXd EmbeddingTable::user(UserId id) const {
  const auto row = user_row(id);
  if (!row) throw DataError("no embedding for user " + std::to_string(id));
  return user_vectors.row(*row).transpose();
}

VectorXd EmbeddingTable::item(ItemId id) const {
  const auto row = item_row(id);
  if (!row) throw DataError("no embedding for item " + std::to_string(id));
  return item_vectors.row(*row).transpose();
}

bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
  return a.user_ids == b.user_ids && a.item_ids == b.item_ids &&
         a.user_vectors.rows() == b.user_vectors.rows() &&
         a.user_vectors.cols() == b.user_vectors.cols() &&
         a.item_vectors.rows() == b.item_vectors.rows() &&
         a.item_vectors.cols() == b.item_vectors.cols() && a.user_vectors == b.user_vectors &&
         a.item_vectors == b.item_vectors;
}

double mf_objective(const MatrixXd& users, const MatrixXd& items,
                    std::span<const MfSample> samples, double l2) {
  double total = 0.0;
  for (const auto& s : samples) {
    const auto p = users.row(s.user_row);
    const auto q = items.row(s.item_row);
    total += softplus(-s.label * p.dot(q)) + 0.5 * l2 * (p.squaredNorm() + q.squaredNorm());
  }
  return total;
}

void mf_gradient(const MatrixXd& users, const MatrixXd& items, std::span<const MfSample> samples,
                 double l2, MatrixXd& grad_users, MatrixXd& grad_items) {
  grad_users = MatrixXd::Zero(users.rows(), users.cols());
  grad_items = MatrixXd::Zero(items.rows(), items.cols());
  for (const auto& s : samples) {
    const auto p = users.row(s.user_row);
    const auto q = items.row(s.item_row);
    const double d = -s.label * sigmoid(-s.label * p.dot(q));
    grad_users.row(s.user_row) += d * q + l2 * p;
    grad_items.row(s.item_row) += d * p + l2 * q;
  }
}

EmbeddingTable train_mf(std::span<const Interaction> interactions, const MfConfig& config,
                        std::vector<double>* epoch_losses) {
  config.validate();
  if (interactions.empty()) throw DataError("mf: no interactions to train on");

  EmbeddingTable table;
  for (const auto& x : interactions) {
    table.user_ids.push_back(x.user);
    table.item_ids.push_back(x.item);
  }
  for (auto* ids : {&table.user_ids, &table.item_ids}) {
    std::sort(ids->begin(), ids->end());
    ids->erase(std::unique(ids->begin(), ids->end()), ids->end());
  }
  const auto n_users = static_cast<Eigen::Index>(table.user_ids.size());
  const auto n_items = static_cast<Eigen::Index>(table.item_ids.size());

  Rng rng(config.rng_seed);
  auto gaussian = [&] { return config.init_stddev * standard_normal(rng); };
  table.user_vectors = MatrixXd::NullaryExpr(n_users, config.dim, gaussian);
  table.item_vectors = MatrixXd::NullaryExpr(n_items, config.dim, gaussian);

  std::vector<MfSample> positives;
  std::vector<std::unordered_set<Eigen::Index>> seen(static_cast<std::size_t>(n_users));
  for (const auto& x : interactions) {
    const Eigen::Index u = *table.user_row(x.user);
    const Eigen::Index i = *table.item_row(x.item);
    if (seen[static_cast<std::size_t>(u)].insert(i).second) positives.push_back({u, i, 1.0});
  }

  auto& P = table.user_vectors;
  auto& Q = table.item_vectors;
  VectorXd p_old(config.dim);
  const double lr = config.learning_rate;
  auto sgd_step = [&](const MfSample& s) {
    auto p = P.row(s.user_row);
    auto q = Q.row(s.item_row);
    const double x = p.dot(q);
    const double d = -s.label * sigmoid(-s.label * x);
    p_old = p.transpose();
    p -= lr * (d * q + config.l2 * p);
    q -= lr * (d * p_old.transpose() + config.l2 * q);
    return softplus(-s.label * x);
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(positives, rng);
    double loss = 0.0;
    std::size_t terms = 0;
    for (const auto& pos : positives) {
      loss += sgd_step(pos);
      ++terms;
      const auto& user_seen = seen[static_cast<std::size_t>(pos.user_row)];
      if (user_seen.size() >= static_cast<std::size_t>(n_items)) continue;
      for (int k = 0; k < config.negatives_per_positive; ++k) {
        Eigen::Index j;
        do {
          j = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n_items)));
        } while (user_seen.contains(j));
        loss += sgd_step({pos.user_row, j, -1.0});
        ++terms;
      }
    }
    loss /= static_cast<double>(terms);
    if (!std::isfinite(loss) || !P.allFinite() || !Q.allFinite()) {
      throw NumericError("mf: training diverged at epoch " + std::to_string(epoch + 1));
    }
    if (epoch_losses) epoch_losses->push_back(loss);
  }
  return table;
}

double pairwise_auc(std::span<const double> positive_scores,
                    std::span<const double> negative_scores) {
  if (positive_scores.empty() || negative_scores.empty()) {
    throw DataError("auc: need at least one positive and one negative score");
  }
  double wins = 0.0;
  for (double p : positive_scores) {
    for (double n : negative_scores) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(positive_scores.size()) *
                 static_cast<double>(negative_scores.size()));
}

double holdout_auc(const EmbeddingTable& table, std::span<const Interaction> held_out,
                   std::span<const Interaction> known, int negatives_per_positive,
                   std::uint64_t rng_seed) {
  if (held_out.empty()) throw DataError("auc: no held-out pairs");
  std::unordered_map<UserId, std::unordered_set<ItemId>> interacted;
  for (const auto* set : {&known, &held_out}) {
    for (const auto& x : *set) interacted[x.user].insert(x.item);
  }

  Rng rng(rng_seed);
  std::vector<double> pos, neg;
  const auto n_items = table.item_ids.size();
  for (const auto& x : held_out) {
    const VectorXd p = table.user(x.user);
    pos.push_back(score(p, table.item(x.item)));
    const auto& mine = interacted[x.user];
    if (mine.size() >= n_items) continue;
    for (int k = 0; k < negatives_per_positive; ++k) {
      ItemId j;
      do {
        j = table.item_ids[uniform_index(rng, n_items)];
      } while (mine.contains(j));
      neg.push_back(score(p, table.item(j)));
    }
  }
  return pairwise_auc(pos, neg);
}

void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ostringstream body;
  body << table.dim() << ' ' << table.user_ids.size() << ' ' << table.item_ids.size() << '\n';
  char buf[32];
  auto write_rows = [&](const auto& ids, const MatrixXd& m) {
    for (std::size_t r = 0; r < ids.size(); ++r) {
      body << ids[r];
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        std::snprintf(buf, sizeof buf, " %.17g", m(static_cast<Eigen::Index>(r), c));
        body << buf;
      }
      body << '\n';
    }
  };
  write_rows(table.user_ids, table.user_vectors);
  write_rows(table.item_ids, table.item_vectors);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write embeddings: " + path.string());
  const std::string text = body.str();
  out << text << "checksum " << fnv1a_hex(text) << '\n';
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream file(path);
  if (!file) throw DataError("cannot open embeddings: " + path.string());
  const std::string all((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  // Trailing "checksum <hex>" line covers everything before it.
  const auto mark = all.rfind("checksum ");
  if (mark == std::string::npos || (mark > 0 && all[mark - 1] != '\n')) {
    throw IntegrityError("embedding file has no checksum: " + path.string());
  }
  std::string stored = all.substr(mark + 9);
  while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.pop_back();
  if (fnv1a_hex(all.substr(0, mark)) != stored) {
    throw IntegrityError("embedding file checksum mismatch: " + path.string());
  }
  std::istringstream in(all.substr(0, mark));
  int dim = 0;
  std::size_t n_users = 0, n_items = 0;
  if (!(in >> dim >> n_users >> n_items) || dim <= 0) {
    throw IntegrityError("embedding file has a malformed header: " + path.string());
  }
  EmbeddingTable table;
  table.user_vectors.resize(static_cast<Eigen::Index>(n_users), dim);
  table.item_vectors.resize(static_cast<Eigen::Index>(n_items), dim);
  auto read_rows = [&](auto& ids, MatrixXd& m, std::size_t n) {
    ids.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      if (!(in >> ids[r])) throw IntegrityError("embedding file truncated: " + path.string());
      for (int c = 0; c < dim; ++c) {
        std::string token;
        if (!(in >> token)) throw IntegrityError("embedding file truncated: " + path.string());
        m(static_cast<Eigen::Index>(r), c) = std::strtod(token.c_str(), nullptr);
      }
    }
    if (!std::is_sorted(ids.begin(), ids.end())) {
      throw IntegrityError("embedding ids out of order: " + path.string());
    }
  };
  read_rows(table.user_ids, table.user_vectors, n_users);
  read_rows(table.item_ids, table.item_vectors, n_items);
  return table;
}

}  // namespace copyattack
