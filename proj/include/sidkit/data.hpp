#pragma once

// Data ingestion: SIDE embedding files, JSONL interaction logs, k-core
// filtering, leave-one-out splitting, and PCA whitening.

#include <sidkit/common.hpp>
#include <sidkit/io.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace sidkit {

struct ItemCatalog {
  std::vector<std::string> ids;  // file order
  MatF embeddings;               // n x d
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(ids.size()); }
  int dim() const { return static_cast<int>(embeddings.cols()); }

  int index_of(const std::string& id) const {
    auto it = index.find(id);
    return it == index.end() ? -1 : it->second;
  }

  static ItemCatalog from_rows(std::vector<std::string> ids, MatF embeddings) {
    if (static_cast<Eigen::Index>(ids.size()) != embeddings.rows())
      throw ValidationError("catalog: id count does not match embedding rows");
    ItemCatalog c;
    c.ids = std::move(ids);
    c.embeddings = std::move(embeddings);
    for (int i = 0; i < c.size(); ++i) {
      if (!c.index.emplace(c.ids[i], i).second)
        throw ValidationError("duplicate item_id: " + c.ids[i]);
    }
    if (!c.embeddings.allFinite())
      throw ValidationError("catalog embeddings contain NaN/Inf");
    return c;
  }
};

struct InteractionLog {
  std::vector<std::string> users;                  // input order
  std::vector<std::vector<std::string>> sequences;  // chronological per user

  int size() const { return static_cast<int>(users.size()); }
};

struct UserSplit {
  std::string user;
  std::vector<std::string> train_items;
  std::optional<std::string> valid_target;
  std::optional<std::string> test_target;
};

struct DatasetSplit {
  std::vector<UserSplit> users;
};

struct WhiteningTransform {
  VecD mean;      // d
  MatD rotation;  // d x d, columns are principal directions (descending)
  VecD scale;     // 1/sqrt(eigenvalue + eps)
  double eps = 1e-6;

  int dim() const { return static_cast<int>(mean.size()); }

  VecD apply(const VecD& x) const {
    return scale.cwiseProduct(rotation.transpose() * (x - mean));
  }
};

// ---------------------------------------------------------------------------
// SIDE binary format: magic "SIDE", version u32=1, n_items u64, dim u32,
// n_items ids (u16 length + UTF-8), then n_items x dim float32 row-major.

inline constexpr char kSideMagic[4] = {'S', 'I', 'D', 'E'};

inline void save_embeddings(const ItemCatalog& catalog, const std::string& path) {
  BinaryWriter w(path);
  w.put_bytes(kSideMagic, 4);
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(catalog.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(catalog.dim()));
  for (const auto& id : catalog.ids) w.put_string_u16(id);
  w.put_matrix(catalog.embeddings);
  w.close();
}

inline ItemCatalog load_embeddings(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.read_bytes(magic, 4);
  if (std::memcmp(magic, kSideMagic, 4) != 0)
    throw FormatError("bad magic in " + path + " (expected SIDE)");
  auto version = r.get<std::uint32_t>();
  if (version != 1)
    throw FormatError("unsupported SIDE version " + std::to_string(version));
  auto n_items = r.get<std::uint64_t>();
  auto dim = r.get<std::uint32_t>();
  if (n_items > (1ull << 32) || dim == 0 || dim > (1u << 20))
    throw FormatError("implausible SIDE header in " + path);

  std::vector<std::string> ids;
  ids.reserve(n_items);
  for (std::uint64_t i = 0; i < n_items; ++i) ids.push_back(r.get_string_u16());

  MatF rows = r.get_matrix<float>(static_cast<Eigen::Index>(n_items),
                                  static_cast<Eigen::Index>(dim));
  return ItemCatalog::from_rows(std::move(ids), std::move(rows));
}

// ---------------------------------------------------------------------------
// Interactions: JSONL, one {"user": ..., "items": [...]} object per line.

inline InteractionLog load_interactions(const std::string& path) {
  std::istringstream in(read_text_file(path));
  InteractionLog log;
  std::unordered_set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("user") ||
        !j.contains("items") || !j["user"].is_string() || !j["items"].is_array())
      throw ParseError("malformed interaction record at line " +
                       std::to_string(line_no));
    std::string user = j["user"].get<std::string>();
    if (!seen.insert(user).second)
      throw ValidationError("duplicate user_id: " + user);
    std::vector<std::string> items;
    for (const auto& v : j["items"]) {
      if (!v.is_string())
        throw ParseError("non-string item at line " + std::to_string(line_no));
      items.push_back(v.get<std::string>());
    }
    if (items.empty())
      throw ValidationError("empty item list for user " + user + " at line " +
                            std::to_string(line_no));
    log.users.push_back(std::move(user));
    log.sequences.push_back(std::move(items));
  }
  return log;
}

inline void save_interactions(const InteractionLog& log, const std::string& path) {
  std::ostringstream out;
  for (int u = 0; u < log.size(); ++u) {
    nlohmann::json j;
    j["user"] = log.users[u];
    j["items"] = log.sequences[u];
    out << j.dump() << "\n";
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// k-core: iteratively drop users with < k interactions and items with < k
// occurrences until a fixed point. Relative order is preserved.

inline std::pair<InteractionLog, ItemCatalog> k_core_filter(
    const InteractionLog& log, const ItemCatalog& catalog, int k) {
  if (k < 1) throw ValidationError("k_core_filter requires k >= 1");

  std::vector<std::vector<std::string>> seqs = log.sequences;
  std::vector<char> user_alive(seqs.size(), 1);

  for (;;) {
    std::unordered_map<std::string, int> item_count;
    for (std::size_t u = 0; u < seqs.size(); ++u) {
      if (!user_alive[u]) continue;
      for (const auto& it : seqs[u]) ++item_count[it];
    }
    bool changed = false;
    for (std::size_t u = 0; u < seqs.size(); ++u) {
      if (!user_alive[u]) continue;
      auto& s = seqs[u];
      auto kept = std::remove_if(s.begin(), s.end(), [&](const std::string& it) {
        auto c = item_count.find(it);
        return c == item_count.end() || c->second < k;
      });
      if (kept != s.end()) {
        s.erase(kept, s.end());
        changed = true;
      }
      if (static_cast<int>(s.size()) < k) {
        user_alive[u] = 0;
        changed = true;
      }
    }
    if (!changed) break;
  }

  InteractionLog out_log;
  std::unordered_set<std::string> surviving_items;
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    if (!user_alive[u]) continue;
    out_log.users.push_back(log.users[u]);
    out_log.sequences.push_back(seqs[u]);
    for (const auto& it : seqs[u]) surviving_items.insert(it);
  }

  std::vector<std::string> ids;
  std::vector<int> rows;
  for (int i = 0; i < catalog.size(); ++i) {
    if (surviving_items.count(catalog.ids[i])) {
      ids.push_back(catalog.ids[i]);
      rows.push_back(i);
    }
  }
  MatF emb(static_cast<Eigen::Index>(rows.size()), catalog.embeddings.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    emb.row(static_cast<Eigen::Index>(r)) = catalog.embeddings.row(rows[r]);
  return {std::move(out_log), ItemCatalog::from_rows(std::move(ids), std::move(emb))};
}

// ---------------------------------------------------------------------------
// Leave-one-out: last item for test, second-to-last for validation. Users
// with exactly 2 items train on the first and validate on the second; users
// with 1 item are train-only.

inline DatasetSplit leave_one_out_split(const InteractionLog& log) {
  if (log.size() == 0) throw ValidationError("leave_one_out_split: empty log");
  DatasetSplit split;
  split.users.reserve(log.size());
  for (int u = 0; u < log.size(); ++u) {
    const auto& seq = log.sequences[u];
    UserSplit s;
    s.user = log.users[u];
    if (seq.size() >= 3) {
      s.train_items.assign(seq.begin(), seq.end() - 2);
      s.valid_target = seq[seq.size() - 2];
      s.test_target = seq.back();
    } else if (seq.size() == 2) {
      s.train_items.assign(seq.begin(), seq.begin() + 1);
      s.valid_target = seq[1];
    } else {
      s.train_items = seq;
    }
    split.users.push_back(std::move(s));
  }
  return split;
}

// ---------------------------------------------------------------------------
// PCA whitening: mean-center, rotate onto principal directions, scale each
// coordinate by 1/sqrt(eigenvalue + eps). Covariance uses the 1/n convention
// so whitened coordinates have population variance 1.

inline WhiteningTransform fit_whitening(const ItemCatalog& catalog,
                                        double eps = 1e-6) {
  const int n = catalog.size();
  const int d = catalog.dim();
  if (n < 2) throw ValidationError("fit_whitening requires at least 2 items");
  if (eps <= 0) throw ValidationError("fit_whitening: eps must be positive");

  MatD x = catalog.embeddings.cast<double>();
  VecD mean = x.colwise().mean();
  MatD centered = x.rowwise() - mean.transpose();
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic> cov =
      (centered.transpose() * centered) / static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>>
      solver(cov);
  if (solver.info() != Eigen::Success)
    throw NumericError("fit_whitening: eigendecomposition failed");

  // Eigen sorts ascending; flip to principal-first.
  WhiteningTransform t;
  t.eps = eps;
  t.mean = mean;
  t.rotation = MatD(d, d);
  t.scale = VecD(d);
  for (int j = 0; j < d; ++j) {
    const int src = d - 1 - j;
    t.rotation.col(j) = solver.eigenvectors().col(src);
    double lambda = std::max(solver.eigenvalues()(src), 0.0);
    t.scale(j) = 1.0 / std::sqrt(lambda + eps);
  }
  if (!t.scale.allFinite() || (t.scale.array() <= 0).any())
    throw NumericError("fit_whitening: non-finite scale");
  return t;
}

inline ItemCatalog apply_whitening(const WhiteningTransform& t,
                                   const ItemCatalog& catalog) {
  if (catalog.dim() != t.dim())
    throw ValidationError("apply_whitening: dimension mismatch (catalog " +
                          std::to_string(catalog.dim()) + ", transform " +
                          std::to_string(t.dim()) + ")");
  MatD x = catalog.embeddings.cast<double>();
  MatD centered = x.rowwise() - t.mean.transpose();
  MatD rotated = centered * t.rotation;  // == (R^T (x - mean))^T row-wise
  rotated.array().rowwise() *= t.scale.transpose().array();
  ItemCatalog out;
  out.ids = catalog.ids;
  out.index = catalog.index;
  out.embeddings = rotated.cast<float>();
  return out;
}

}  // namespace sidkit
