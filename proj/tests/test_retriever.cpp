#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <sstream>

#include "mmrag/retriever.hpp"
#include "mmrag/text.hpp"

using namespace mmrag;

namespace {

Tensor vec(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor::from_values({n}, std::move(v));
}

// Quantized random vectors so exact score ties actually occur.
Tensor random_grid_vector(std::size_t d, Rng& rng) {
    static const double levels[5] = {-1.0, -0.5, 0.0, 0.5, 1.0};
    Tensor t = Tensor::zeros({d});
    bool nonzero = false;
    for (std::size_t i = 0; i < d; ++i) {
        t.at(i) = levels[rng.below(5)];
        nonzero = nonzero || t.at(i) != 0.0;
    }
    if (!nonzero) t.at(rng.below(d)) = 1.0;
    return t;
}

// Brute-force oracle: score everything, stable sort by (score desc, id asc).
std::vector<Candidate> brute_force_top_k(const std::vector<PolicyVector>& entries, const Tensor& q,
                                         std::size_t k) {
    std::vector<Candidate> all;
    for (const auto& e : entries) all.push_back({e.doc_id, cosine_sim(q, e.v)});
    std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
    });
    if (all.size() > k) all.resize(k);
    return all;
}

VectorIndex index_from_vectors(const std::vector<PolicyVector>& vecs) {
    std::vector<PolicyDocument> docs;
    for (const auto& pv : vecs) docs.push_back({pv.doc_id, "doc " + std::to_string(pv.doc_id), 0, {}});
    std::size_t i = 0;
    return VectorIndex::build(docs, [&](const PolicyDocument&) { return vecs[i++].v; });
}

}  // namespace

TEST_CASE("cosine similarity identities") {
    Tensor x = vec({2, -1, 0.5});
    CHECK(cosine_sim(x, x) == Catch::Approx(1.0).margin(1e-12));
    CHECK(cosine_sim(vec({1, 0}), vec({0, 1})) == Catch::Approx(0.0).margin(1e-12));
    Tensor nx = vec({-2, 1, -0.5});
    CHECK(cosine_sim(x, nx) == Catch::Approx(-1.0).margin(1e-12));

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = random_grid_vector(6, rng);
        Tensor v = random_grid_vector(6, rng);
        const double alpha = rng.uniform(0.1, 5.0), beta = rng.uniform(0.1, 5.0);
        Tensor qa = q.clone(), vb = v.clone();
        for (std::size_t i = 0; i < 6; ++i) {
            qa.at(i) *= alpha;
            vb.at(i) *= beta;
        }
        CHECK(cosine_sim(qa, vb) == Catch::Approx(cosine_sim(q, v)).margin(1e-12));
    }

    CHECK_THROWS_AS(cosine_sim(vec({0, 0}), vec({1, 0})), ContractError);
}

TEST_CASE("top_k hand-checked ordering") {
    // scores: d0 ~ 0.9-ish, d1 low, d2 middle
    std::vector<PolicyVector> entries;
    entries.push_back({0, vec({0.9, std::sqrt(1 - 0.81)})});
    entries.push_back({1, vec({0.1, std::sqrt(1 - 0.01)})});
    entries.push_back({2, vec({0.5, std::sqrt(1 - 0.25)})});
    VectorIndex idx = index_from_vectors(entries);
    Tensor q = vec({1, 0});

    CandidateSet top2 = idx.top_k(q, 2);
    REQUIRE(top2.items.size() == 2);
    CHECK(top2.items[0].doc_id == 0);
    CHECK(top2.items[1].doc_id == 2);

    CandidateSet all = idx.top_k(q, 3);
    REQUIRE(all.items.size() == 3);
    CHECK(all.items[0].doc_id == 0);
    CHECK(all.items[1].doc_id == 2);
    CHECK(all.items[2].doc_id == 1);

    // k beyond M returns all M
    CandidateSet over = idx.top_k(q, 50);
    CHECK(over.items.size() == 3);
}

TEST_CASE("top_k matches the brute-force oracle over 1000 randomized trials") {
    Rng rng(4242);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t m = 1 + rng.below(256);
        const std::size_t d = 2 + rng.below(6);
        std::vector<PolicyVector> entries;
        std::vector<std::uint64_t> ids;
        for (std::size_t i = 0; i < m; ++i) ids.push_back(i * 3 + 1);  // non-contiguous ids
        rng.shuffle(ids);
        for (std::size_t i = 0; i < m; ++i) entries.push_back({ids[i], random_grid_vector(d, rng)});
        VectorIndex idx = index_from_vectors(entries);
        Tensor q = random_grid_vector(d, rng);
        const std::size_t k = 1 + rng.below(m);

        CandidateSet got = idx.top_k(q, k);
        std::vector<Candidate> want = brute_force_top_k(entries, q, k);
        REQUIRE(got.items.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            REQUIRE(got.items[i].doc_id == want[i].doc_id);
            REQUIRE(got.items[i].score == want[i].score);
        }
        for (const auto& c : got.items) {
            CHECK(c.score >= -1.0);
            CHECK(c.score <= 1.0);
        }
    }
}

TEST_CASE("insertion order does not change the candidate set") {
    Rng rng(77);
    std::vector<PolicyVector> entries;
    for (std::size_t i = 0; i < 40; ++i) entries.push_back({i, random_grid_vector(4, rng)});
    Tensor q = random_grid_vector(4, rng);

    VectorIndex a = index_from_vectors(entries);
    std::vector<PolicyVector> shuffled = entries;
    rng.shuffle(shuffled);
    VectorIndex b = index_from_vectors(shuffled);

    CandidateSet ca = a.top_k(q, 7);
    CandidateSet cb = b.top_k(q, 7);
    REQUIRE(ca.items.size() == cb.items.size());
    for (std::size_t i = 0; i < ca.items.size(); ++i) {
        CHECK(ca.items[i].doc_id == cb.items[i].doc_id);
        CHECK(ca.items[i].score == cb.items[i].score);
    }
}

TEST_CASE("query scale invariance") {
    Rng rng(78);
    std::vector<PolicyVector> entries;
    for (std::size_t i = 0; i < 30; ++i) entries.push_back({i, random_grid_vector(5, rng)});
    VectorIndex idx = index_from_vectors(entries);
    Tensor q = random_grid_vector(5, rng);
    Tensor q3 = q.clone();
    for (std::size_t i = 0; i < 5; ++i) q3.at(i) *= 3.75;

    CandidateSet a = idx.top_k(q, 10);
    CandidateSet b = idx.top_k(q3, 10);
    REQUIRE(a.items.size() == b.items.size());
    for (std::size_t i = 0; i < a.items.size(); ++i) CHECK(a.items[i].doc_id == b.items[i].doc_id);
}

TEST_CASE("degenerate retrieval inputs are rejected") {
    std::vector<PolicyVector> entries = {{0, vec({1, 0})}};
    VectorIndex idx = index_from_vectors(entries);
    CHECK_THROWS_AS(idx.top_k(vec({0, 0}), 1), ContractError);
    CHECK_THROWS_AS(VectorIndex().top_k(vec({1, 0}), 1), ContractError);

    std::vector<PolicyDocument> dup = {{5, "a", 0, {}}, {5, "b", 1, {}}};
    CHECK_THROWS_AS(
        VectorIndex::build(dup, [](const PolicyDocument&) { return Tensor::from_values({2}, {1, 0}); }),
        ContractError);

    CHECK_THROWS_AS(VectorIndex::build({}, [](const PolicyDocument&) { return Tensor(); }),
                    ContractError);
}

TEST_CASE("single-document index behaves") {
    std::vector<PolicyDocument> docs = {{9, "roof coverage clause", 2, {"roof"}}};
    VectorIndex idx =
        VectorIndex::build(docs, [](const PolicyDocument&) { return Tensor::from_values({3}, {1, 2, 2}); });
    CHECK(idx.size() == 1);
    Tensor q = vec({2, 1, 0});
    CandidateSet c = idx.top_k(q, 1);
    REQUIRE(c.items.size() == 1);
    CHECK(c.items[0].doc_id == 9);
    CHECK(c.items[0].score == Catch::Approx(cosine_sim(q, idx.entries()[0].v)));
}

TEST_CASE("index save/load round-trips bit-exactly and preserves retrieval") {
    Rng rng(81);
    std::vector<PolicyVector> entries;
    for (std::size_t i = 0; i < 25; ++i) entries.push_back({i * 7 + 3, random_grid_vector(6, rng)});
    VectorIndex idx = index_from_vectors(entries);

    std::stringstream ss;
    idx.save(ss);
    VectorIndex back = VectorIndex::load(ss);
    REQUIRE(back.size() == idx.size());
    REQUIRE(back.dim() == idx.dim());

    for (int trial = 0; trial < 100; ++trial) {
        Tensor q = random_grid_vector(6, rng);
        CandidateSet a = idx.top_k(q, 5);
        CandidateSet b = back.top_k(q, 5);
        REQUIRE(a.items.size() == b.items.size());
        for (std::size_t i = 0; i < a.items.size(); ++i) {
            CHECK(a.items[i].doc_id == b.items[i].doc_id);
            CHECK(a.items[i].score == b.items[i].score);
        }
    }
}

TEST_CASE("corrupt index files fail with a byte offset") {
    Rng rng(82);
    std::vector<PolicyVector> entries = {{1, random_grid_vector(4, rng)},
                                         {2, random_grid_vector(4, rng)}};
    VectorIndex idx = index_from_vectors(entries);
    std::stringstream ss;
    idx.save(ss);
    std::string bytes = ss.str();

    // flip one payload byte: checksum must catch it
    std::string flipped = bytes;
    flipped[20] = static_cast<char>(flipped[20] ^ 0x40);
    std::istringstream corrupt(flipped);
    try {
        VectorIndex::load(corrupt);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.byte_offset == bytes.size() - 4);
    }

    // truncation
    std::istringstream cut(bytes.substr(0, 10));
    CHECK_THROWS_AS(VectorIndex::load(cut), FormatError);
}

TEST_CASE("corpus JSONL round trip") {
    std::vector<PolicyDocument> docs = {
        {1, "flood coverage for minor damage", 1, {"flood", "sev1"}},
        {2, "fire exclusion clause total loss", 4, {"fire", "sev4"}},
    };
    std::stringstream ss;
    write_corpus(ss, docs);
    std::vector<PolicyDocument> back = read_corpus(ss);
    REQUIRE(back.size() == 2);
    CHECK(back[0].id == 1);
    CHECK(back[0].text == docs[0].text);
    CHECK(back[1].severity_level == 4);
    REQUIRE(back[1].coverage_tags.size() == 2);
    CHECK(back[1].coverage_tags[0] == "fire");

    std::stringstream bad("{\"id\": 3, \"text\": \"\", \"severity_level\": 0}\n");
    CHECK_THROWS_AS(read_corpus(bad), ContractError);
    std::stringstream malformed("not json\n");
    CHECK_THROWS_AS(read_corpus(malformed), FormatError);
}
