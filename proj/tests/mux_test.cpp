#include <gtest/gtest.h>

#include <random>
#include <unordered_set>

#include "quicsb/mux.hpp"

namespace quicsb::mux {
namespace {

TEST(MuxPolicy, DivisibleByThreeSequence) {
    MuxPolicy p;
    EXPECT_EQ(p.generate_stream_id_divisible_by_3().id(), 6u);
    EXPECT_EQ(p.generate_stream_id_divisible_by_3().id(), 12u);
    EXPECT_EQ(p.generate_stream_id_divisible_by_3().id(), 18u);
}

TEST(MuxPolicy, NormalSequence) {
    MuxPolicy p;
    EXPECT_EQ(p.generate_normal_stream_id().id(), 2u);
    EXPECT_EQ(p.generate_normal_stream_id().id(), 4u);
    EXPECT_EQ(p.generate_normal_stream_id().id(), 8u);
    EXPECT_EQ(p.generate_normal_stream_id().id(), 10u);
    EXPECT_EQ(p.generate_normal_stream_id().id(), 14u);
    EXPECT_EQ(p.generate_normal_stream_id().id(), 16u);
}

TEST(MuxPolicy, MillionDistinctOpenFlowIds) {
    MuxPolicy p;
    std::unordered_set<uint64_t> seen;
    for (int i = 0; i < 1'000'000; ++i) {
        uint64_t id = p.generate_stream_id_divisible_by_3().id();
        ASSERT_EQ(id % 2, 0u);
        ASSERT_EQ(id % 3, 0u);
        seen.insert(id);
    }
    EXPECT_EQ(seen.size(), 1'000'000u);
}

TEST(MuxPolicy, InterleavedGeneratorsAreDisjoint) {
    MuxPolicy p;
    std::mt19937 rng(1);
    std::unordered_set<uint64_t> openflow, ovsdb;
    for (int i = 0; i < 100'000; ++i) {
        if (rng() & 1) {
            openflow.insert(p.generate_stream_id_divisible_by_3().id());
        } else {
            uint64_t id = p.generate_normal_stream_id().id();
            ASSERT_NE(id % 3, 0u);
            ASSERT_EQ(id % 2, 0u);
            ovsdb.insert(id);
        }
    }
    for (uint64_t id : ovsdb) ASSERT_FALSE(openflow.count(id)) << id;
}

TEST(MuxPolicy, Exhaustion) {
    MuxPolicy p(kMaxStreamId / 6, kMaxStreamId);
    try {
        p.generate_stream_id_divisible_by_3();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::IdSpaceExhausted);
    }
    EXPECT_THROW(p.generate_normal_stream_id(), Error);
    MuxPolicy edge(kMaxStreamId / 6 - 1, 0);
    EXPECT_LE(edge.generate_stream_id_divisible_by_3().id(), kMaxStreamId);
}

TEST(Classify, Examples) {
    EXPECT_EQ(classify(6), Protocol::OpenFlow);
    EXPECT_EQ(classify(4), Protocol::Ovsdb);
    try {
        classify(7);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::OddStreamId);
    }
}

TEST(Classify, RoutingRoundTrip) {
    MuxPolicy p;
    std::mt19937 rng(3);
    for (int i = 0; i < 10'000; ++i) {
        Protocol want = rng() & 1 ? Protocol::OpenFlow : Protocol::Ovsdb;
        EXPECT_EQ(classify(p.next_for(want)), want);
    }
}

TEST(StreamLabel, Invariants) {
    EXPECT_THROW(StreamLabel(0), Error);
    EXPECT_THROW(StreamLabel(3), Error);
    EXPECT_NO_THROW(StreamLabel(2));
}

TEST(ConnMap, BindAndLookup) {
    ConnMap map;
    EXPECT_FALSE(map.bind(6653, StreamLabel(6)).has_value());
    EXPECT_EQ(map.lookup(6653), StreamLabel(6));
    EXPECT_EQ(map.lookup_port(StreamLabel(6)), 6653);

    map.bind(6640, StreamLabel(4));
    EXPECT_EQ(classify(*map.lookup(6640)), Protocol::Ovsdb);
}

TEST(ConnMap, PolicyViolation) {
    ConnMap map;
    try {
        map.bind(6653, StreamLabel(4));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::PolicyViolation);
    }
    EXPECT_THROW(map.bind(6640, StreamLabel(6)), Error);
    EXPECT_THROW(map.bind(9999, StreamLabel(6)), Error);
    EXPECT_EQ(map.size(), 0u);
}

TEST(ConnMap, RebindReturnsPriorAndStaysBijective) {
    ConnMap map;
    map.bind(6653, StreamLabel(6));
    auto prior = map.bind(6653, StreamLabel(12));
    ASSERT_TRUE(prior.has_value());
    EXPECT_EQ(prior->id(), 6u);
    EXPECT_FALSE(map.lookup_port(StreamLabel(6)).has_value());
    EXPECT_EQ(map.lookup_port(StreamLabel(12)), 6653);
}

TEST(ConnMap, BijectiveUnderRandomOperations) {
    ConnMap map;
    MuxPolicy p;
    std::mt19937 rng(11);
    std::vector<StreamLabel> issued;
    for (int i = 0; i < 5000; ++i) {
        bool of = rng() & 1;
        StreamLabel label = (rng() % 4 == 0 && !issued.empty()) ? issued[rng() % issued.size()]
                                                                  : p.next_for(of ? Protocol::OpenFlow : Protocol::Ovsdb);
        issued.push_back(label);
        uint16_t port = classify(label) == Protocol::OpenFlow ? 6653 : 6640;
        map.bind(port, label);
        for (uint16_t q : {uint16_t{6653}, uint16_t{6640}}) {
            if (auto l = map.lookup(q)) {
                ASSERT_EQ(map.lookup_port(*l), q);
            }
        }
        ASSERT_LE(map.size(), 2u);
    }
}

}  // namespace
}  // namespace quicsb::mux
