#pragma once

// Embedding-indexed knowledge store with exhaustive cosine k-NN.
//
// Embeddings are L2-normalized at ingestion, so similarity is a dot product.
// Results are ordered by similarity descending, then record id ascending.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "hlguide/errors.hpp"
#include "hlguide/sequence.hpp"
#include "hlguide/weights_io.hpp"

namespace hlguide {

enum class Modality { radiology, pathology, other };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::radiology: return "radiology";
    case Modality::pathology: return "pathology";
    case Modality::other: return "other";
  }
  return "other";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "radiology") return Modality::radiology;
  if (s == "pathology") return Modality::pathology;
  return Modality::other;
}

struct KnowledgeRecord {
  std::string id;
  std::string caption;
  std::vector<std::string> keywords;
  std::optional<Vector> image_embedding;
  std::optional<Vector> text_embedding;
  Modality modality = Modality::other;
};

inline void to_json(nlohmann::json& j, const KnowledgeRecord& r) {
  j = nlohmann::json{{"id", r.id}, {"caption", r.caption}, {"keywords", r.keywords}, {"modality", to_string(r.modality)}};
  if (r.image_embedding) j["image_embedding"] = *r.image_embedding;
  if (r.text_embedding) j["text_embedding"] = *r.text_embedding;
}

inline void from_json(const nlohmann::json& j, KnowledgeRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.caption = j.value("caption", std::string{});
  r.keywords = j.value("keywords", std::vector<std::string>{});
  r.modality = parse_modality(j.value("modality", std::string("other")));
  r.image_embedding.reset();
  r.text_embedding.reset();
  if (j.contains("image_embedding") && !j.at("image_embedding").is_null())
    r.image_embedding = j.at("image_embedding").get<Vector>();
  if (j.contains("text_embedding") && !j.at("text_embedding").is_null())
    r.text_embedding = j.at("text_embedding").get<Vector>();
}

/// Returns v / |v|; nullopt for a zero or non-finite vector.
inline std::optional<Vector> l2_normalized(const Vector& v) {
  double n2 = 0.0;
  for (const double x : v) n2 += x * x;
  if (!(n2 > 0.0) || !std::isfinite(n2)) return std::nullopt;
  const double inv = 1.0 / std::sqrt(n2);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
  return out;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

struct QueryEmbedding {
  std::optional<Vector> image_embedding;
  std::optional<Vector> text_embedding;

  /// Normalizes whichever embeddings are present; throws if none is usable.
  static QueryEmbedding make(std::optional<Vector> image, std::optional<Vector> text) {
    QueryEmbedding q;
    if (image) {
      q.image_embedding = l2_normalized(*image);
      require(q.image_embedding.has_value(), "query: image embedding is zero");
    }
    if (text) {
      q.text_embedding = l2_normalized(*text);
      require(q.text_embedding.has_value(), "query: text embedding is zero");
    }
    require(q.image_embedding || q.text_embedding, "query: at least one embedding required");
    return q;
  }
};

enum class Strategy { image, text, sum, union_ };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::image: return "image";
    case Strategy::text: return "text";
    case Strategy::sum: return "sum";
    case Strategy::union_: return "union";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "image") return Strategy::image;
  if (s == "text") return Strategy::text;
  if (s == "sum") return Strategy::sum;
  if (s == "union") return Strategy::union_;
  throw ContractViolation("unknown retrieval strategy '" + s + "'");
}

enum class MatchedFeature { image, text, sum, union_image, union_text };

inline std::string_view to_string(MatchedFeature f) {
  switch (f) {
    case MatchedFeature::image: return "image";
    case MatchedFeature::text: return "text";
    case MatchedFeature::sum: return "sum";
    case MatchedFeature::union_image: return "union-image";
    case MatchedFeature::union_text: return "union-text";
  }
  return "?";
}

struct RetrievalResult {
  std::string id;
  double similarity = 0.0;
  MatchedFeature matched = MatchedFeature::image;
  bool operator==(const RetrievalResult&) const = default;
};

inline bool result_order(const RetrievalResult& a, const RetrievalResult& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.id < b.id;
}

class KnowledgeStore {
 public:
  KnowledgeStore() = default;

  /// Validates and normalizes records. Duplicate ids (all listed) and records
  /// without a usable embedding are rejected.
  static KnowledgeStore ingest(std::vector<KnowledgeRecord> records) { return assemble(std::move(records), true); }

  std::size_t size() const { return records_.size(); }
  std::size_t image_dim() const { return image_dim_; }
  std::size_t text_dim() const { return text_dim_; }
  const std::vector<KnowledgeRecord>& records() const { return records_; }

  const KnowledgeRecord* find(const std::string& id) const {
    const auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &records_[it->second];
  }

  const KnowledgeRecord& at(const std::string& id) const {
    const auto* r = find(id);
    if (!r) throw NotFound("record not found: " + id);
    return *r;
  }

  std::vector<RetrievalResult> knn(const QueryEmbedding& query, std::size_t k, Strategy strategy) const {
    require(k >= 1, "knn: k must be >= 1");
    const bool need_image = strategy == Strategy::image || strategy == Strategy::sum || strategy == Strategy::union_;
    const bool need_text = strategy == Strategy::text || strategy == Strategy::sum || strategy == Strategy::union_;
    require(!need_image || query.image_embedding.has_value(),
            "knn: strategy " + std::string(to_string(strategy)) + " needs a query image embedding");
    require(!need_text || query.text_embedding.has_value(),
            "knn: strategy " + std::string(to_string(strategy)) + " needs a query text embedding");
    if (need_image) require(records_.empty() || image_dim_ == 0 || query.image_embedding->size() == image_dim_,
                            "knn: query image embedding dimension mismatch");
    if (need_text) require(records_.empty() || text_dim_ == 0 || query.text_embedding->size() == text_dim_,
                           "knn: query text embedding dimension mismatch");

    std::vector<RetrievalResult> all;
    all.reserve(records_.size());
    switch (strategy) {
      case Strategy::image:
        for (std::size_t i = 0; i < records_.size(); ++i) {
          if (const double* row = image_row(i)) {
            all.push_back({records_[i].id, dot(row, query.image_embedding->data(), image_dim_), MatchedFeature::image});
          }
        }
        break;
      case Strategy::text:
        for (std::size_t i = 0; i < records_.size(); ++i) {
          if (const double* row = text_row(i)) {
            all.push_back({records_[i].id, dot(row, query.text_embedding->data(), text_dim_), MatchedFeature::text});
          }
        }
        break;
      case Strategy::sum: {
        const Vector q = combined(query.image_embedding, query.text_embedding);
        for (std::size_t i = 0; i < records_.size(); ++i) {
          const Vector& r = combined_[i];
          if (r.size() != q.size()) continue;  // record lacks one feature
          all.push_back({records_[i].id, dot(r.data(), q.data(), q.size()), MatchedFeature::sum});
        }
        break;
      }
      case Strategy::union_:
        for (std::size_t i = 0; i < records_.size(); ++i) {
          const double* ir = image_row(i);
          const double* tr = text_row(i);
          if (!ir && !tr) continue;
          const double si = ir ? dot(ir, query.image_embedding->data(), image_dim_) : -2.0;
          const double st = tr ? dot(tr, query.text_embedding->data(), text_dim_) : -2.0;
          if (si >= st) all.push_back({records_[i].id, si, MatchedFeature::union_image});
          else all.push_back({records_[i].id, st, MatchedFeature::union_text});
        }
        break;
    }
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), result_order);
    all.resize(take);
    return all;
  }

  /// Persists as dir/header.json plus flat little-endian float64 matrices
  /// dir/image.f64 and dir/text.f64 (rows in record order, only for records
  /// that have the feature).
  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json recs = nlohmann::json::array();
    std::string image_blob, text_blob;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      recs.push_back({{"id", r.id},
                      {"caption", r.caption},
                      {"keywords", r.keywords},
                      {"modality", to_string(r.modality)},
                      {"has_image", r.image_embedding.has_value()},
                      {"has_text", r.text_embedding.has_value()}});
      if (r.image_embedding) append_f64(image_blob, *r.image_embedding);
      if (r.text_embedding) append_f64(text_blob, *r.text_embedding);
    }
    const nlohmann::json header = {{"format", "hlguide-store"}, {"version", 1},          {"count", records_.size()},
                                   {"image_dim", image_dim_},   {"text_dim", text_dim_}, {"records", recs}};
    write_file(dir / "header.json", header.dump(1));
    write_file(dir / "image.f64", image_blob);
    write_file(dir / "text.f64", text_blob);
  }

  static KnowledgeStore load(const std::filesystem::path& dir) {
    std::ifstream hin(dir / "header.json");
    if (!hin) throw NotFound("store header not found in " + dir.string());
    const nlohmann::json header = nlohmann::json::parse(hin);
    if (header.value("format", "") != "hlguide-store") throw ConfigError("not a knowledge store: " + dir.string());
    const auto image_dim = header.at("image_dim").get<std::size_t>();
    const auto text_dim = header.at("text_dim").get<std::size_t>();
    const std::string image_blob = read_file(dir / "image.f64");
    const std::string text_blob = read_file(dir / "text.f64");
    std::size_t io = 0, to = 0;
    std::vector<KnowledgeRecord> records;
    for (const auto& h : header.at("records")) {
      KnowledgeRecord r;
      r.id = h.at("id").get<std::string>();
      r.caption = h.at("caption").get<std::string>();
      r.keywords = h.at("keywords").get<std::vector<std::string>>();
      r.modality = parse_modality(h.at("modality").get<std::string>());
      if (h.at("has_image").get<bool>()) r.image_embedding = read_f64(image_blob, io, image_dim);
      if (h.at("has_text").get<bool>()) r.text_embedding = read_f64(text_blob, to, text_dim);
      records.push_back(std::move(r));
    }
    return assemble(std::move(records), false);
  }

 private:
  // Saved stores hold unit vectors already; normalizing twice would move the
  // last bits and change similarities.
  static KnowledgeStore assemble(std::vector<KnowledgeRecord> records, bool normalize) {
    std::map<std::string, std::size_t> seen;
    std::set<std::string> duplicates;
    std::vector<std::string> empty;
    for (const auto& r : records) {
      if (++seen[r.id] > 1) duplicates.insert(r.id);
    }
    if (!duplicates.empty()) {
      std::string msg = "ingest: duplicate record ids:";
      for (const auto& d : duplicates) msg += " " + d;
      throw ValidationError(msg);
    }
    KnowledgeStore store;
    for (auto& r : records) {
      if (normalize && r.image_embedding) r.image_embedding = l2_normalized(*r.image_embedding);
      if (normalize && r.text_embedding) r.text_embedding = l2_normalized(*r.text_embedding);
      if (!r.image_embedding && !r.text_embedding) empty.push_back(r.id);
    }
    if (!empty.empty()) {
      std::string msg = "ingest: records without a non-zero embedding:";
      for (const auto& e : empty) msg += " " + e;
      throw ValidationError(msg);
    }
    for (auto& r : records) {
      check_dim(store.image_dim_, r.image_embedding, r.id, "image");
      check_dim(store.text_dim_, r.text_embedding, r.id, "text");
    }
    store.records_ = std::move(records);
    store.build_index();
    return store;
  }

  static void check_dim(std::size_t& dim, const std::optional<Vector>& v, const std::string& id, const char* what) {
    if (!v) return;
    if (dim == 0) dim = v->size();
    if (v->size() != dim) throw ValidationError(std::string("ingest: ") + what + " embedding dimension mismatch for " + id);
  }

  static Vector combined(const std::optional<Vector>& image, const std::optional<Vector>& text) {
    if (image && text) {
      Vector s(image->size());
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = (*image)[i] + (*text)[i];
      auto n = l2_normalized(s);
      return n ? *n : Vector{};
    }
    return {};
  }

  void build_index() {
    by_id_.clear();
    image_rows_.assign(records_.size(), npos);
    text_rows_.assign(records_.size(), npos);
    image_matrix_.clear();
    text_matrix_.clear();
    combined_.assign(records_.size(), Vector{});
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      by_id_[r.id] = i;
      if (r.image_embedding) {
        image_rows_[i] = image_matrix_.size() / std::max<std::size_t>(image_dim_, 1);
        image_matrix_.insert(image_matrix_.end(), r.image_embedding->begin(), r.image_embedding->end());
      }
      if (r.text_embedding) {
        text_rows_[i] = text_matrix_.size() / std::max<std::size_t>(text_dim_, 1);
        text_matrix_.insert(text_matrix_.end(), r.text_embedding->begin(), r.text_embedding->end());
      }
      if (r.image_embedding && r.text_embedding && image_dim_ == text_dim_) {
        combined_[i] = combined(r.image_embedding, r.text_embedding);
      }
    }
  }

  const double* image_row(std::size_t i) const {
    return image_rows_[i] == npos ? nullptr : image_matrix_.data() + image_rows_[i] * image_dim_;
  }
  const double* text_row(std::size_t i) const {
    return text_rows_[i] == npos ? nullptr : text_matrix_.data() + text_rows_[i] * text_dim_;
  }

  static void append_f64(std::string& blob, const Vector& v) {
    for (const double x : v) detail::put_u64(blob, std::bit_cast<std::uint64_t>(x));
  }

  static Vector read_f64(const std::string& blob, std::size_t& offset, std::size_t n) {
    if (offset + 8 * n > blob.size()) throw ConfigError("knowledge store: truncated embedding matrix");
    Vector v(n);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(detail::get_u64(p + offset + 8 * i));
    offset += 8 * n;
    return v;
  }

  static void write_file(const std::filesystem::path& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  }

  static std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw NotFound("missing file " + p.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::vector<KnowledgeRecord> records_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::size_t image_dim_ = 0;
  std::size_t text_dim_ = 0;
  std::vector<std::size_t> image_rows_, text_rows_;
  Vector image_matrix_, text_matrix_;
  std::vector<Vector> combined_;
};

/// Keeps results with similarity >= threshold, preserving order.
inline std::vector<RetrievalResult> clip_score_filter(const std::vector<RetrievalResult>& results,
                                                      double threshold = 0.6) {
  require(threshold >= -1.0 && threshold <= 1.0, "clip score filter: threshold must be in [-1, 1]");
  std::vector<RetrievalResult> out;
  for (const auto& r : results) {
    if (r.similarity >= threshold) out.push_back(r);
  }
  return out;
}

/// Reads a whole file, transparently gunzipping it if compressed.
inline std::string read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw NotFound("cannot open " + path.string());
  std::string data;
  char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) data.append(buf, static_cast<std::size_t>(n));
  int errnum = 0;
  const char* msg = gzerror(f, &errnum);
  const std::string err = errnum != Z_OK && errnum != Z_STREAM_END ? msg : "";
  gzclose(f);
  if (!err.empty()) throw Error("read error in " + path.string() + ": " + err);
  return data;
}

struct CorpusReadResult {
  std::vector<KnowledgeRecord> records;
  std::vector<std::string> errors;  // "line N: message"
};

/// Parses a JSONL corpus (optionally gzip-compressed), one KnowledgeRecord per line.
inline CorpusReadResult read_corpus_jsonl(const std::filesystem::path& path) {
  const std::string data = read_maybe_gzip(path);
  CorpusReadResult out;
  std::size_t start = 0, lineno = 0;
  while (start < data.size()) {
    std::size_t end = data.find('\n', start);
    if (end == std::string::npos) end = data.size();
    ++lineno;
    const std::string_view line(data.data() + start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      out.records.push_back(nlohmann::json::parse(line).get<KnowledgeRecord>());
    } catch (const std::exception& e) {
      out.errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace hlguide
