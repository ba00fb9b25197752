#include <copyattack/checkpoint.hpp>
#include <copyattack/hash.hpp>
#include <copyattack/metrics.hpp>
#include <copyattack/random.hpp>
#include <copyattack/recommender.hpp>

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

namespace copyattack {

using nlohmann::json;

std::string to_string(TargetKind kind) {
  return kind == TargetKind::item_knn ? "item-knn" : "implicit-mf";
}

TargetKind parse_target_kind(const std::string& name) {
  if (name == "item-knn") return TargetKind::item_knn;
  if (name == "implicit-mf") return TargetKind::implicit_mf;
  throw ConfigError("unknown target model kind '" + name + "' (expected item-knn or implicit-mf)");
}

// ---------------------------------------------------------------------------

TargetModel::TargetModel(int item_count, std::vector<Profile> profiles, TargetConfig config)
    : profiles_(std::move(profiles)),
      degree_(static_cast<std::size_t>(item_count), 0),
      item_count_(item_count),
      config_(std::move(config)) {
  for (const auto& p : profiles_) {
    for (ItemId item : p) {
      if (item < 0 || item >= item_count_) {
        throw DataError("profile references item " + std::to_string(item) +
                        " outside the catalog");
      }
      ++degree_[static_cast<std::size_t>(item)];
    }
  }
}

const Profile& TargetModel::profile(UserId user) const {
  if (user < 0 || user >= user_count()) {
    throw DataError("unknown user " + std::to_string(user));
  }
  return profiles_[static_cast<std::size_t>(user)];
}

namespace {

struct Ranked {
  double score;
  ItemId item;
  bool operator<(const Ranked& o) const {
    return score != o.score ? score > o.score : item < o.item;
  }
};

}  // namespace

TopK TargetModel::query_topk(UserId user, int k, CandidateMode mode) const {
  if (k < 1) throw ConfigError("query_topk: k must be at least 1");
  const Profile& mine = profile(user);

  std::vector<ItemId> candidates;
  if (mode.sampled) {
    candidates = sample_negatives(*this, user, mode.sample_size, {}, mode.seed);
  } else {
    std::vector<char> interacted(static_cast<std::size_t>(item_count_), 0);
    for (ItemId i : mine) interacted[static_cast<std::size_t>(i)] = 1;
    for (ItemId i = 0; i < item_count_; ++i) {
      if (!interacted[static_cast<std::size_t>(i)]) candidates.push_back(i);
    }
  }

  VectorXd scores;
  score_all(user, scores);
  std::vector<Ranked> pool;
  pool.reserve(candidates.size());
  for (ItemId i : candidates) pool.push_back({scores[i], i});

  TopK out;
  const std::size_t keep = std::min(pool.size(), static_cast<std::size_t>(k));
  out.truncated = pool.size() < static_cast<std::size_t>(k);
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end());
  for (std::size_t r = 0; r < keep; ++r) out.items.push_back(pool[r].item);
  return out;
}

std::vector<ItemId> TargetModel::rank(UserId user, std::span<const ItemId> candidates) const {
  profile(user);
  VectorXd scores;
  score_all(user, scores);
  std::vector<Ranked> pool;
  for (ItemId i : candidates) pool.push_back({scores[i], i});
  std::sort(pool.begin(), pool.end());
  std::vector<ItemId> out;
  for (const auto& r : pool) out.push_back(r.item);
  return out;
}

std::vector<UserId> TargetModel::inject_profiles(std::span<const Profile> profiles) {
  for (const auto& p : profiles) {
    if (p.empty()) throw DataError("cannot inject an empty profile");
    for (ItemId item : p) {
      if (item < 0 || item >= item_count_) {
        throw DataError("injected profile references unknown item " + std::to_string(item));
      }
    }
  }
  const auto first = static_cast<UserId>(profiles_.size());
  std::vector<UserId> ids;
  for (const auto& p : profiles) {
    ids.push_back(static_cast<UserId>(profiles_.size()));
    profiles_.push_back(p);
    for (ItemId item : p) ++degree_[static_cast<std::size_t>(item)];
  }
  if (!profiles.empty()) on_inject(first, static_cast<UserId>(profiles_.size()));
  return ids;
}

void TargetModel::synchronize() { on_synchronize(); }

json TargetModel::to_json() const {
  json body = {
      {"format", "copyattack.target"},
      {"version", 1},
      {"kind", to_string(kind())},
      {"item_count", item_count_},
      {"config",
       {{"fold_in_l2", config_.fold_in_l2},
        {"refresh_every", config_.refresh_every},
        {"knn_length_weighting", config_.knn_length_weighting},
        {"knn_neighbors", config_.knn_neighbors},
        {"knn_scoring", to_string(config_.knn_scoring)},
        {"mf",
         {{"dim", config_.mf.dim},
          {"learning_rate", config_.mf.learning_rate},
          {"negatives_per_positive", config_.mf.negatives_per_positive},
          {"epochs", config_.mf.epochs},
          {"l2", config_.mf.l2},
          {"init_stddev", config_.mf.init_stddev},
          {"rng_seed", config_.mf.rng_seed}}}}},
      {"profiles", profiles_},
      {"parameters", parameters_json()},
  };
  body["checksum"] = fnv1a_hex(body.dump());
  return body;
}

// ---------------------------------------------------------------------------

ItemKnnModel::ItemKnnModel(int item_count, std::vector<Profile> profiles, TargetConfig config)
    : TargetModel(item_count, std::move(profiles), std::move(config)) {
  counts_.setZero(item_count_, item_count_);
  weights_.setZero(item_count_, item_count_);
  for (const auto& p : profiles_) add_profile(p);
}

std::unique_ptr<TargetModel> ItemKnnModel::clone() const {
  return std::make_unique<ItemKnnModel>(*this);
}

void ItemKnnModel::add_profile(const Profile& profile) {
  if (profile.empty()) return;
  const double w = config_.knn_length_weighting ? 1.0 / static_cast<double>(profile.size()) : 1.0;
  for (ItemId a : profile) {
    for (ItemId b : profile) {
      ++counts_(a, b);
      weights_(a, b) += w;
    }
  }
}

double ItemKnnModel::similarity(ItemId a, ItemId b) const {
  const double da = weights_(a, a), db = weights_(b, b);
  if (da == 0 || db == 0) return 0.0;
  return weights_(a, b) / std::sqrt(da * db);
}

std::string to_string(KnnScoring scoring) {
  return scoring == KnnScoring::vote ? "vote" : "weighted-average";
}

KnnScoring parse_knn_scoring(const std::string& name) {
  if (name == "vote") return KnnScoring::vote;
  if (name == "weighted-average") return KnnScoring::weighted_average;
  throw ConfigError("unknown item-knn scoring '" + name + "' (expected vote or weighted-average)");
}

void ItemKnnModel::refresh_neighbors() const {
  if (!votes_stale_) return;
  const Eigen::Index n = item_count_;
  const VectorXd diag = weights_.diagonal();
  const VectorXd inv = diag.unaryExpr([](double d) { return d > 0 ? 1.0 / std::sqrt(d) : 0.0; });
  votes_ = inv.asDiagonal() * weights_ * inv.asDiagonal();
  votes_.diagonal().setZero();
  const int keep = config_.knn_neighbors;
  std::vector<double> column;
  for (Eigen::Index j = 0; keep > 0 && j < n; ++j) {
    auto col = votes_.col(j);
    column.clear();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (col[i] > 0) column.push_back(col[i]);
    }
    if (column.size() <= static_cast<std::size_t>(keep)) continue;
    std::nth_element(column.begin(), column.begin() + (keep - 1), column.end(), std::greater<>());
    const double cut = column[static_cast<std::size_t>(keep - 1)];
    col = (col.array() < cut).select(0.0, col);
  }
  if (config_.knn_scoring == KnnScoring::weighted_average) {
    votes_.transposeInPlace();
    mass_ = votes_.rowwise().sum();
  }
  votes_stale_ = false;
}

bool ItemKnnModel::is_neighbor(ItemId item, ItemId of) const {
  refresh_neighbors();
  return config_.knn_scoring == KnnScoring::vote ? votes_(item, of) > 0 : votes_(of, item) > 0;
}

void ItemKnnModel::score_all(UserId user, VectorXd& scores) const {
  refresh_neighbors();
  scores = VectorXd::Zero(item_count_);
  for (ItemId j : profiles_[static_cast<std::size_t>(user)]) scores += votes_.col(j);
  if (config_.knn_scoring == KnnScoring::weighted_average) {
    for (Eigen::Index i = 0; i < item_count_; ++i) scores[i] = mass_[i] > 0 ? scores[i] / mass_[i] : 0.0;
  }
}

void ItemKnnModel::on_inject(UserId first_new, UserId end) {
  if (end > first_new) votes_stale_ = true;
  for (UserId u = first_new; u < end; ++u) add_profile(profiles_[static_cast<std::size_t>(u)]);
}

json ItemKnnModel::parameters_json() const { return json::object(); }

// ---------------------------------------------------------------------------

ImplicitMfModel::ImplicitMfModel(int item_count, std::vector<Profile> profiles,
                                 TargetConfig config, MatrixXd user_factors,
                                 MatrixXd item_factors)
    : TargetModel(item_count, std::move(profiles), std::move(config)),
      users_(std::move(user_factors)),
      items_(std::move(item_factors)) {
  if (users_.rows() != user_count() || items_.rows() != item_count_ ||
      users_.cols() != items_.cols()) {
    throw IntegrityError("implicit-mf factor shapes do not match the catalog");
  }
}

std::unique_ptr<TargetModel> ImplicitMfModel::clone() const {
  return std::make_unique<ImplicitMfModel>(*this);
}

void ImplicitMfModel::score_all(UserId user, VectorXd& scores) const {
  scores = items_ * users_.row(user).transpose();
}

VectorXd ImplicitMfModel::fold_in(const Profile& profile) const {
  const auto e = items_.cols();
  MatrixXd a = config_.fold_in_l2 * MatrixXd::Identity(e, e);
  VectorXd b = VectorXd::Zero(e);
  for (ItemId i : profile) {
    const auto q = items_.row(i).transpose();
    a.noalias() += q * q.transpose();
    b += q;
  }
  return a.ldlt().solve(b);
}

void ImplicitMfModel::on_inject(UserId first_new, UserId end) {
  users_.conservativeResize(user_count(), Eigen::NoChange);
  for (UserId u = first_new; u < end; ++u) {
    const auto& p = profiles_[static_cast<std::size_t>(u)];
    users_.row(u) = fold_in(p).transpose();
    pending_.insert(pending_.end(), p.begin(), p.end());
  }
  injected_since_refresh_ += end - first_new;
  if (config_.refresh_every > 0 && injected_since_refresh_ >= config_.refresh_every) {
    on_synchronize();
  }
}

void ImplicitMfModel::on_synchronize() {
  injected_since_refresh_ = 0;
  if (pending_.empty()) return;
  std::sort(pending_.begin(), pending_.end());
  pending_.erase(std::unique(pending_.begin(), pending_.end()), pending_.end());
  std::vector<char> touched(static_cast<std::size_t>(item_count_), 0);
  for (ItemId i : pending_) touched[static_cast<std::size_t>(i)] = 1;

  const auto e = items_.cols();
  std::vector<MatrixXd> a(pending_.size(), config_.fold_in_l2 * MatrixXd::Identity(e, e));
  std::vector<VectorXd> b(pending_.size(), VectorXd::Zero(e));
  for (UserId u = 0; u < user_count(); ++u) {
    const auto p = users_.row(u).transpose();
    for (ItemId i : profiles_[static_cast<std::size_t>(u)]) {
      if (!touched[static_cast<std::size_t>(i)]) continue;
      const auto slot = static_cast<std::size_t>(
          std::lower_bound(pending_.begin(), pending_.end(), i) - pending_.begin());
      a[slot].noalias() += p * p.transpose();
      b[slot] += p;
    }
  }
  for (std::size_t s = 0; s < pending_.size(); ++s) {
    items_.row(pending_[s]) = a[s].ldlt().solve(b[s]).transpose();
  }
  pending_.clear();
}

json ImplicitMfModel::parameters_json() const {
  auto rows = [](const MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
      out.push_back(std::move(row));
    }
    return out;
  };
  return {{"dim", items_.cols()},
          {"user_factors", rows(users_)},
          {"item_factors", rows(items_)},
          {"pending", pending_},
          {"injected_since_refresh", injected_since_refresh_}};
}

// ---------------------------------------------------------------------------

std::unique_ptr<TargetModel> fit_target(std::span<const Profile> train_profiles, int item_count,
                                        const TargetConfig& config) {
  std::vector<Profile> profiles(train_profiles.begin(), train_profiles.end());
  const auto interactions = flatten(profiles);
  if (interactions.empty()) throw DataError("fit_target: empty training set");

  switch (config.kind) {
    case TargetKind::item_knn:
      return std::make_unique<ItemKnnModel>(item_count, std::move(profiles), config);
    case TargetKind::implicit_mf: {
      const EmbeddingTable table = train_mf(interactions, config.mf);
      MatrixXd users = MatrixXd::Zero(static_cast<Eigen::Index>(profiles.size()), config.mf.dim);
      MatrixXd items = MatrixXd::Zero(item_count, config.mf.dim);
      for (std::size_t r = 0; r < table.user_ids.size(); ++r) {
        users.row(table.user_ids[r]) = table.user_vectors.row(static_cast<Eigen::Index>(r));
      }
      for (std::size_t r = 0; r < table.item_ids.size(); ++r) {
        items.row(table.item_ids[r]) = table.item_vectors.row(static_cast<Eigen::Index>(r));
      }
      return std::make_unique<ImplicitMfModel>(item_count, std::move(profiles), config,
                                               std::move(users), std::move(items));
    }
  }
  throw ConfigError("fit_target: unknown model kind");
}

std::unique_ptr<TargetModel> target_from_json(const json& j) {
  try {
    if (j.at("format") != "copyattack.target") throw IntegrityError("not a target checkpoint");
    json body = j;
    const std::string stored = body.at("checksum");
    body.erase("checksum");
    if (fnv1a_hex(body.dump()) != stored) {
      throw IntegrityError("target checkpoint checksum mismatch");
    }
    TargetConfig config;
    config.kind = parse_target_kind(j.at("kind"));
    const auto& c = j.at("config");
    config.fold_in_l2 = c.at("fold_in_l2");
    config.refresh_every = c.at("refresh_every");
    config.knn_length_weighting = c.at("knn_length_weighting");
    config.knn_neighbors = c.at("knn_neighbors");
    config.knn_scoring = parse_knn_scoring(c.at("knn_scoring"));
    const auto& m = c.at("mf");
    config.mf.dim = m.at("dim");
    config.mf.learning_rate = m.at("learning_rate");
    config.mf.negatives_per_positive = m.at("negatives_per_positive");
    config.mf.epochs = m.at("epochs");
    config.mf.l2 = m.at("l2");
    config.mf.init_stddev = m.at("init_stddev");
    config.mf.rng_seed = m.at("rng_seed");
    const int item_count = j.at("item_count");
    auto profiles = j.at("profiles").get<std::vector<Profile>>();

    if (config.kind == TargetKind::item_knn) {
      return std::make_unique<ItemKnnModel>(item_count, std::move(profiles), config);
    }
    const auto& p = j.at("parameters");
    const int dim = p.at("dim");
    auto matrix = [dim](const json& rows) {
      MatrixXd out(static_cast<Eigen::Index>(rows.size()), dim);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != static_cast<std::size_t>(dim)) {
          throw IntegrityError("factor row has the wrong width");
        }
        for (int c2 = 0; c2 < dim; ++c2) out(static_cast<Eigen::Index>(r), c2) = rows[r][c2];
      }
      return out;
    };
    auto model = std::make_unique<ImplicitMfModel>(item_count, std::move(profiles), config,
                                                   matrix(p.at("user_factors")),
                                                   matrix(p.at("item_factors")));
    if (!p.at("pending").empty()) {
      throw IntegrityError("implicit-mf checkpoint saved with unsynchronized injections");
    }
    return model;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed target checkpoint: ") + e.what());
  }
}

void save_target(const TargetModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write target checkpoint: " + path.string());
  out << model.to_json().dump() << '\n';
}

std::unique_ptr<TargetModel> load_target(const std::filesystem::path& path) {
  return target_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------

PretendUserSet create_pretend_users(TargetModel& model, int count, int profile_length,
                                    std::span<const ItemId> excluded_items,
                                    std::uint64_t rng_seed) {
  if (count <= 0) throw ConfigError("pretend user count must be positive");
  if (profile_length <= 0) throw ConfigError("pretend profile length must be positive");

  std::vector<double> base(static_cast<std::size_t>(model.item_count()));
  for (ItemId i = 0; i < model.item_count(); ++i) base[static_cast<std::size_t>(i)] = model.item_degree(i);
  for (ItemId i : excluded_items) base.at(static_cast<std::size_t>(i)) = 0.0;
  const auto available = std::count_if(base.begin(), base.end(), [](double w) { return w > 0; });
  if (available < profile_length) {
    throw DataError("catalog has only " + std::to_string(available) +
                    " sampleable items for pretend profiles of length " +
                    std::to_string(profile_length));
  }

  Rng rng(rng_seed);
  PretendUserSet set;
  for (int n = 0; n < count; ++n) {
    std::vector<double> weights = base;
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    Profile p;
    for (int k = 0; k < profile_length; ++k) {
      const std::size_t pick = sample_weighted(weights, total, rng);
      p.push_back(static_cast<ItemId>(pick));
      total -= weights[pick];
      weights[pick] = 0.0;
    }
    set.profiles.push_back(std::move(p));
  }
  set.user_ids = model.inject_profiles(set.profiles);
  model.synchronize();
  return set;
}

// ---------------------------------------------------------------------------

std::vector<ItemId> sample_negatives(const TargetModel& model, UserId user, int n,
                                     std::span<const ItemId> exclude, std::uint64_t seed) {
  std::vector<char> blocked(static_cast<std::size_t>(model.item_count()), 0);
  for (ItemId i : model.profile(user)) blocked[static_cast<std::size_t>(i)] = 1;
  for (ItemId i : exclude) blocked[static_cast<std::size_t>(i)] = 1;
  std::vector<ItemId> pool;
  for (ItemId i = 0; i < model.item_count(); ++i) {
    if (!blocked[static_cast<std::size_t>(i)]) pool.push_back(i);
  }
  if (pool.size() <= static_cast<std::size_t>(std::max(n, 0))) return pool;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(user)));
  for (std::size_t k = 0; k < static_cast<std::size_t>(n); ++k) {
    std::swap(pool[k], pool[k + uniform_index(rng, pool.size() - k)]);
  }
  pool.resize(static_cast<std::size_t>(n));
  return pool;
}

MetricTable evaluate_offline(const TargetModel& model, std::span<const Interaction> test,
                             std::span<const int> k_values, int negatives,
                             std::uint64_t rng_seed) {
  MetricTable table;
  if (test.empty()) return table;
  std::vector<double> hr(k_values.size(), 0.0), ndcg(k_values.size(), 0.0);
  std::set<UserId> users;
  for (const auto& x : test) {
    if (x.user < 0 || x.user >= model.user_count()) {
      ++table.n_skipped;
      continue;
    }
    const auto& mine = model.profile(x.user);
    if (std::find(mine.begin(), mine.end(), x.item) != mine.end()) {
      ++table.n_skipped;
      continue;
    }
    const ItemId held_out[] = {x.item};
    auto candidates = sample_negatives(model, x.user, negatives, held_out,
                                       derive_seed(rng_seed, static_cast<std::uint64_t>(x.item)));
    candidates.push_back(x.item);
    const auto ranked = model.rank(x.user, candidates);
    const std::size_t pos = *rank_position(ranked, x.item);
    for (std::size_t k = 0; k < k_values.size(); ++k) {
      hr[k] += hit_at(pos, k_values[k]);
      ndcg[k] += ndcg_at(pos, k_values[k]);
    }
    ++table.n_pairs;
    users.insert(x.user);
  }
  if (table.n_pairs == 0) return table;
  for (std::size_t k = 0; k < k_values.size(); ++k) {
    table.rows.push_back({k_values[k], hr[k] / table.n_pairs, ndcg[k] / table.n_pairs,
                          static_cast<int>(users.size())});
  }
  return table;
}

void write_metric_csv(const MetricTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metric table: " + path.string());
  out << "K,HR,NDCG,n_users_evaluated\n";
  char buf[128];
  for (const auto& r : table.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%d\n", r.k, r.hr, r.ndcg, r.n_users_evaluated);
    out << buf;
  }
}

// ---------------------------------------------------------------------------

RecommenderEnvironment::RecommenderEnvironment(std::shared_ptr<const TargetModel> checkpoint,
                                               PretendUserSet pretend)
    : checkpoint_(std::move(checkpoint)),
      current_(checkpoint_->clone()),
      pretend_(std::move(pretend)) {}

void RecommenderEnvironment::reset() { current_ = checkpoint_->clone(); }

void RecommenderEnvironment::inject(std::span<const Profile> profiles) {
  current_->inject_profiles(profiles);
}

std::vector<std::vector<ItemId>> RecommenderEnvironment::query_pretend_users(int k) {
  current_->synchronize();
  std::vector<std::vector<ItemId>> lists;
  lists.reserve(pretend_.user_ids.size());
  for (UserId u : pretend_.user_ids) lists.push_back(current_->query_topk(u, k).items);
  return lists;
}

}  // namespace copyattack
