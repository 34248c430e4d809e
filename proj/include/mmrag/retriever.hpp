#pragma once

// Policy corpus, vector index, and exact cosine Top-K retrieval. The index
// is a flat scan with a bounded heap: M stays small at this scale and the
// tests require exact agreement with a brute-force sort, tie order included.
//
// Index file layout: "PVIX" | u32 version | u32 M | u32 d |
//   M x (u64 doc_id, d x f64 LE) | u32 CRC-32 of all preceding bytes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmrag/common.hpp"
#include "mmrag/tensor.hpp"
#include "mmrag/tensor_io.hpp"

namespace mmrag {

struct PolicyDocument {
    std::uint64_t id = 0;
    std::string text;
    int severity_level = 0;
    std::vector<std::string> coverage_tags;

    void validate() const {
        if (text.empty()) throw ContractError("policy document " + std::to_string(id) + " has empty text");
        if (severity_level < 0 || severity_level > 4)
            throw ContractError("policy document " + std::to_string(id) + " severity " +
                                std::to_string(severity_level) + " outside 0..4");
    }
};

// JSON-lines corpus: one {id, text, severity_level, coverage_tags} per line.
inline std::vector<PolicyDocument> read_corpus(std::istream& is) {
    std::vector<PolicyDocument> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw FormatError("corpus line " + std::to_string(lineno) + ": " + e.what(), 0);
        }
        PolicyDocument d;
        d.id = j.at("id").get<std::uint64_t>();
        d.text = j.at("text").get<std::string>();
        d.severity_level = j.at("severity_level").get<int>();
        if (j.contains("coverage_tags"))
            d.coverage_tags = j.at("coverage_tags").get<std::vector<std::string>>();
        d.validate();
        docs.push_back(std::move(d));
    }
    return docs;
}

inline std::vector<PolicyDocument> load_corpus(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    return read_corpus(is);
}

inline void write_corpus(std::ostream& os, const std::vector<PolicyDocument>& docs) {
    for (const auto& d : docs) {
        nlohmann::json j;
        j["id"] = d.id;
        j["text"] = d.text;
        j["severity_level"] = d.severity_level;
        j["coverage_tags"] = d.coverage_tags;
        os << j.dump() << "\n";
    }
}

inline void save_corpus(const std::string& path, const std::vector<PolicyDocument>& docs) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_corpus(os, docs);
}

struct PolicyVector {
    std::uint64_t doc_id = 0;
    Tensor v;  // [d], nonzero norm
};

struct Candidate {
    std::uint64_t doc_id = 0;
    double score = 0.0;
};

// Top-K retrieval result, scores non-increasing, ties by ascending doc id.
struct CandidateSet {
    std::vector<Candidate> items;

    bool contains(std::uint64_t doc_id) const {
        for (const auto& c : items)
            if (c.doc_id == doc_id) return true;
        return false;
    }
};

inline double vector_norm(const Tensor& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.numel(); ++i) s += v.at(i) * v.at(i);
    return std::sqrt(s);
}

// Eq-style normalized cosine; clamped into [-1,1] against fp spill.
inline double cosine_sim(const Tensor& q, const Tensor& v) {
    if (q.shape() != v.shape())
        throw ShapeError("cosine_sim: " + shape_str(q.shape()) + " vs " + shape_str(v.shape()));
    const double nq = vector_norm(q), nv = vector_norm(v);
    if (nq == 0.0 || nv == 0.0) throw ContractError("degenerate vector: zero norm in cosine_sim");
    double dot = 0.0;
    for (std::size_t i = 0; i < q.numel(); ++i) dot += q.at(i) * v.at(i);
    return std::clamp(dot / (nq * nv), -1.0, 1.0);
}

class VectorIndex {
  public:
    VectorIndex() = default;

    static VectorIndex build(const std::vector<PolicyDocument>& docs,
                             const std::function<Tensor(const PolicyDocument&)>& encode,
                             std::uint64_t encoder_hash = 0) {
        if (docs.empty()) throw ContractError("cannot build index from zero documents");
        VectorIndex idx;
        idx.encoder_hash_ = encoder_hash;
        for (const auto& d : docs) {
            Tensor v = encode(d);
            if (v.rank() != 1) throw ConfigError("document encoder must produce rank-1 vectors");
            if (idx.entries_.empty()) {
                idx.dim_ = v.numel();
            } else if (v.numel() != idx.dim_) {
                throw ConfigError("document vector dim " + std::to_string(v.numel()) +
                                  " != index dim " + std::to_string(idx.dim_));
            }
            if (vector_norm(v) == 0.0)
                throw ContractError("document " + std::to_string(d.id) + " encoded to zero vector");
            for (const auto& e : idx.entries_)
                if (e.doc_id == d.id)
                    throw ContractError("duplicate doc_id " + std::to_string(d.id) + " in index");
            idx.entries_.push_back({d.id, std::move(v)});
        }
        return idx;
    }

    std::size_t size() const { return entries_.size(); }
    std::size_t dim() const { return dim_; }
    const std::vector<PolicyVector>& entries() const { return entries_; }
    std::uint64_t encoder_hash() const { return encoder_hash_; }
    std::uint64_t timestamp() const { return timestamp_; }
    void set_timestamp(std::uint64_t t) { timestamp_ = t; }

    const PolicyVector& entry(std::uint64_t doc_id) const {
        for (const auto& e : entries_)
            if (e.doc_id == doc_id) return e;
        throw ContractError("doc_id " + std::to_string(doc_id) + " not in index");
    }

    // Exact Top-K by cosine score, descending; ties break toward the smaller
    // doc id. k > M degrades to the full ranking of all M entries.
    CandidateSet top_k(const Tensor& q, std::size_t k) const {
        if (entries_.empty()) throw ContractError("top_k on empty index");
        if (k == 0) throw ContractError("top_k requires k >= 1");
        if (vector_norm(q) == 0.0) throw ContractError("degenerate vector: zero-norm query");
        const std::size_t keep = std::min(k, entries_.size());

        auto better = [](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.doc_id < b.doc_id;
        };
        // Max-heap under "better", so top() is the worst kept candidate.
        std::priority_queue<Candidate, std::vector<Candidate>, decltype(better)> worst_first(better);
        for (const auto& e : entries_) {
            Candidate c{e.doc_id, cosine_sim(q, e.v)};
            if (worst_first.size() < keep) {
                worst_first.push(c);
            } else if (better(c, worst_first.top())) {
                worst_first.pop();
                worst_first.push(c);
            }
        }
        CandidateSet out;
        out.items.resize(worst_first.size());
        for (std::size_t i = worst_first.size(); i-- > 0;) {
            out.items[i] = worst_first.top();
            worst_first.pop();
        }
        return out;
    }

    void save(std::ostream& os) const {
        std::ostringstream body;
        body.write("PVIX", 4);
        detail::put_u32(body, kVersion);
        detail::put_u32(body, static_cast<std::uint32_t>(entries_.size()));
        detail::put_u32(body, static_cast<std::uint32_t>(dim_));
        for (const auto& e : entries_) {
            const std::uint64_t id = e.doc_id;
            unsigned char b[8];
            for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(id >> (8 * i));
            body.write(reinterpret_cast<const char*>(b), 8);
            for (std::size_t i = 0; i < dim_; ++i) detail::put_f64(body, e.v.at(i));
        }
        const std::string payload = body.str();
        os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        detail::put_u32(os, crc32(payload.data(), payload.size()));
    }

    void save_file(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open " + path + " for writing");
        save(os);
        if (!os) throw IoError("write failed for " + path);
    }

    static VectorIndex load(std::istream& is) {
        std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        if (payload.size() < 4 + 4 + 4 + 4 + 4)
            throw FormatError("index file too short", payload.size());
        const std::size_t body_size = payload.size() - 4;
        const std::uint32_t stored_crc =
            static_cast<std::uint32_t>(static_cast<unsigned char>(payload[body_size])) |
            (static_cast<std::uint32_t>(static_cast<unsigned char>(payload[body_size + 1])) << 8) |
            (static_cast<std::uint32_t>(static_cast<unsigned char>(payload[body_size + 2])) << 16) |
            (static_cast<std::uint32_t>(static_cast<unsigned char>(payload[body_size + 3])) << 24);
        if (crc32(payload.data(), body_size) != stored_crc)
            throw FormatError("index checksum mismatch", body_size);

        std::istringstream body(payload.substr(0, body_size));
        std::uint64_t offset = 0;
        char magic[4];
        body.read(magic, 4);
        if (body.gcount() != 4 || std::memcmp(magic, "PVIX", 4) != 0)
            throw FormatError("bad PVIX magic", 0);
        offset = 4;
        const std::uint32_t version = detail::get_u32(body, offset, "version");
        if (version != kVersion)
            throw FormatError("unsupported index version " + std::to_string(version), 4);
        const std::uint32_t m = detail::get_u32(body, offset, "entry count");
        const std::uint32_t d = detail::get_u32(body, offset, "dimension");
        if (m == 0 || d == 0) throw FormatError("empty index payload", offset);

        VectorIndex idx;
        idx.dim_ = d;
        for (std::uint32_t i = 0; i < m; ++i) {
            unsigned char b[8];
            body.read(reinterpret_cast<char*>(b), 8);
            if (body.gcount() != 8) throw FormatError("truncated doc id", offset);
            offset += 8;
            std::uint64_t id = 0;
            for (int j = 0; j < 8; ++j) id |= static_cast<std::uint64_t>(b[j]) << (8 * j);
            Tensor v = Tensor::zeros({d});
            for (std::uint32_t j = 0; j < d; ++j) v.at(j) = detail::get_f64(body, offset, "vector");
            idx.entries_.push_back({id, std::move(v)});
        }
        return idx;
    }

    static VectorIndex load_file(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open " + path);
        return load(is);
    }

    // CRC-32 (IEEE 802.3), table-driven.
    static std::uint32_t crc32(const char* data, std::size_t n) {
        static const auto table = [] {
            std::array<std::uint32_t, 256> t{};
            for (std::uint32_t i = 0; i < 256; ++i) {
                std::uint32_t c = i;
                for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
                t[i] = c;
            }
            return t;
        }();
        std::uint32_t crc = 0xFFFFFFFFu;
        for (std::size_t i = 0; i < n; ++i)
            crc = table[(crc ^ static_cast<unsigned char>(data[i])) & 0xFF] ^ (crc >> 8);
        return crc ^ 0xFFFFFFFFu;
    }

  private:
    static constexpr std::uint32_t kVersion = 1;
    std::size_t dim_ = 0;
    std::vector<PolicyVector> entries_;
    std::uint64_t encoder_hash_ = 0;
    std::uint64_t timestamp_ = 0;
};

}  // namespace mmrag
