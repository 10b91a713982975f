#include "test_util.hpp"

using namespace maenas;

namespace {

float& el(Tensor& t, int r, int c) { return t[static_cast<size_t>(r) * t.dim(1) + c]; }
float el(const Tensor& t, int r, int c) { return t[static_cast<size_t>(r) * t.dim(1) + c]; }

void set_row(ArchParams& a, CellKind k, int edge, const std::vector<float>& row) {
    Tensor& t = a.alpha.at(k).mutable_value();
    for (size_t i = 0; i < row.size(); ++i) t[static_cast<size_t>(edge) * t.dim(1) + i] = row[i];
}

// Independent re-derivation: rank edges by max non-none weight, keep 2, argmax op.
CellGenotype brute_force_derive(const ArchParams& a, const CellSpec& spec) {
    const Tensor& t = a.of(spec.cell_kind).value();
    CellGenotype out;
    for (int j = spec.num_inputs; j < spec.total_nodes(); ++j) {
        struct Cand {
            double w;
            int from;
            OpKind op;
        };
        std::vector<Cand> c;
        for (int e = 0; e < spec.num_edges(); ++e) {
            if (spec.edges[e].to != j) continue;
            double z = 0, mx = -1e300;
            for (int k = 0; k < spec.num_ops(); ++k) mx = std::max(mx, static_cast<double>(el(t, e, k)));
            for (int k = 0; k < spec.num_ops(); ++k) z += std::exp(el(t, e, k) - mx);
            Cand best{-1, spec.edges[e].from, OpKind::none};
            for (int k = 0; k < spec.num_ops(); ++k) {
                const double p = std::exp(el(t, e, k) - mx) / z;
                if (spec.op_set[k] != OpKind::none && p > best.w) best = {p, spec.edges[e].from, spec.op_set[k]};
            }
            c.push_back(best);
        }
        for (size_t x = 0; x < c.size(); ++x)
            for (size_t y = x + 1; y < c.size(); ++y)
                if (c[y].w > c[x].w || (c[y].w == c[x].w && c[y].from < c[x].from)) std::swap(c[x], c[y]);
        std::vector<GenotypeEntry> node{{c[0].op, c[0].from}, {c[1].op, c[1].from}};
        if (node[0].predecessor > node[1].predecessor) std::swap(node[0], node[1]);
        out.push_back(node);
    }
    return out;
}

} // namespace

TEST(SearchSpace, DartsShape) {
    const auto s = SearchSpace::darts();
    EXPECT_EQ(s.normal.num_edges(), 14);
    EXPECT_EQ(s.normal.num_ops(), 8);
    EXPECT_EQ(s.normal.op_set.front(), OpKind::none);
    ASSERT_TRUE(s.reduction.has_value());
    const auto n = SearchSpace::nb201();
    EXPECT_EQ(n.normal.num_edges(), 6);
    EXPECT_EQ(n.normal.num_ops(), 5);
    EXPECT_FALSE(n.reduction.has_value());
}

TEST(SearchSpace, OpNamesRoundTrip) {
    for (const auto& o : kOperationTable) EXPECT_EQ(op_from_name(o.name), o.id);
    EXPECT_THROW(op_from_name("conv_7x7"), std::invalid_argument);
    EXPECT_TRUE(op_info(OpKind::skip_connect).is_skip);
    EXPECT_FALSE(op_info(OpKind::max_pool_3x3).is_parametric);
    EXPECT_TRUE(op_info(OpKind::sep_conv_3x3).is_parametric);
}

TEST(CellSpec, RejectsIllegalStructures) {
    CellSpec c = CellSpec::dense(2, 2, darts_op_set(), CellKind::normal, EdgeSelection::top2);
    c.edges.push_back({3, 2});
    EXPECT_THROW(c.validate(), std::invalid_argument);
    CellSpec d = CellSpec::dense(2, 2, darts_op_set(), CellKind::normal, EdgeSelection::top2);
    d.op_set.clear();
    EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(CellSpec, DuplicateOpsRejected) {
    EXPECT_THROW(CellSpec::dense(2, 2, {OpKind::skip_connect, OpKind::skip_connect}, CellKind::normal, EdgeSelection::top2),
                 std::invalid_argument);
}

TEST(CellSpec, Top2NodeWithOneIncomingEdgeRejected) {
    CellSpec c = CellSpec::dense(2, 2, darts_op_set(), CellKind::normal, EdgeSelection::top2);
    c.edges.erase(c.edges.begin());
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(EdgeWeights, Examples) {
    auto space = SearchSpace::nb201({OpKind::none, OpKind::skip_connect, OpKind::conv_3x3});
    auto a = ArchParams::zeros(space);
    for (double w : edge_weights(a, space.normal, 0)) EXPECT_NEAR(w, 1.0 / 3, 1e-12);
    set_row(a, CellKind::normal, 1, {4.5f, 4.5f, 4.5f});
    for (double w : edge_weights(a, space.normal, 1)) EXPECT_NEAR(w, 1.0 / 3, 1e-12);
    set_row(a, CellKind::normal, 2, {10, 0, 0});
    EXPECT_GT(edge_weights(a, space.normal, 2)[0], 0.99);
    EXPECT_NEAR(edge_weights(a, space.normal, 2)[0], 1.0 / (1.0 + 2.0 * std::exp(-10.0)), 1e-12);
}

TEST(EdgeWeights, UnknownEdgeNamed) {
    auto space = SearchSpace::darts();
    auto a = ArchParams::zeros(space);
    try {
        edge_weights(a, space.normal, Edge{4, 2});
        FAIL();
    } catch (const std::out_of_range& e) {
        EXPECT_NE(std::string(e.what()).find("4->2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(edge_weights(a, space.normal, 14), std::out_of_range);
}

TEST(EdgeWeights, PropertySumToOneAndShiftInvariant) {
    auto space = SearchSpace::darts();
    auto rng = rng_for(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = ArchParams::random(space, rng, 5.0);
        auto b = a.clone();
        const float shift = static_cast<float>(uniform01(rng) * 100 - 50);
        const int edge = static_cast<int>(uniform_index(rng, 14));
        Tensor& t = b.alpha.at(CellKind::normal).mutable_value();
        for (int k = 0; k < 8; ++k) el(t, edge, k) += shift;
        const auto wa = edge_weights(a, space.normal, edge);
        const auto wb = edge_weights(b, space.normal, edge);
        double s = 0;
        for (size_t k = 0; k < wa.size(); ++k) {
            s += wa[k];
            EXPECT_GT(wa[k], 0.0);
            EXPECT_NEAR(wa[k], wb[k], 1e-5);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(DeriveGenotype, OverwhelmingSkipGivesAllSkip) {
    auto space = SearchSpace::darts();
    auto a = ArchParams::zeros(space);
    const int skip = space.normal.op_index(OpKind::skip_connect);
    for (auto& [k, v] : a.alpha)
        for (int e = 0; e < 14; ++e) el(v.mutable_value(), e, skip) = 20.f;
    const auto g = derive_genotype(a, space);
    int skips = 0;
    for (const auto& node : g.cell(CellKind::normal))
        for (const auto& p : node) skips += p.op == OpKind::skip_connect;
    EXPECT_EQ(skips, 2 * 4);
}

TEST(DeriveGenotype, NoneNeverChosenEvenWhenDominant) {
    auto space = SearchSpace::darts();
    auto a = ArchParams::zeros(space);
    for (auto& [k, v] : a.alpha)
        for (int e = 0; e < 14; ++e) el(v.mutable_value(), e, 0) = 30.f;
    const auto g = derive_genotype(a, space);
    EXPECT_TRUE(validate_genotype(g, space).empty());
}

TEST(DeriveGenotype, TieChoosesLowerOpIndexThenLowerPredecessor) {
    auto space = SearchSpace::darts();
    auto a = ArchParams::zeros(space);
    const auto g = derive_genotype(a, space);
    // all weights equal: first non-none op, two lowest predecessors
    for (const auto& node : g.cell(CellKind::normal)) {
        ASSERT_EQ(node.size(), 2u);
        EXPECT_EQ(node[0].op, space.normal.op_set[1]);
        EXPECT_EQ(node[0].predecessor, 0);
        EXPECT_EQ(node[1].predecessor, 1);
    }
}

TEST(DeriveGenotype, MatchesBruteForceOnRandomAlpha) {
    auto space = SearchSpace::darts();
    auto rng = rng_for(11);
    for (int trial = 0; trial < 100; ++trial) {
        auto a = ArchParams::random(space, rng, 2.0);
        const auto g = derive_genotype(a, space);
        EXPECT_TRUE(validate_genotype(g, space).empty());
        for (const CellSpec* spec : space.cells()) {
            int pairs = 0;
            for (const auto& node : g.cell(spec->cell_kind)) pairs += static_cast<int>(node.size());
            EXPECT_EQ(pairs, 8);
            EXPECT_EQ(g.cell(spec->cell_kind), brute_force_derive(a, *spec)) << "trial " << trial;
        }
    }
}

TEST(DeriveGenotype, PureAndByteStable) {
    auto space = SearchSpace::darts();
    auto rng = rng_for(12);
    auto a = ArchParams::random(space, rng, 1.0);
    EXPECT_EQ(genotype_to_string(derive_genotype(a, space)), genotype_to_string(derive_genotype(a.clone(), space)));
}

TEST(DeriveGenotype, EveryEdgeCellKeepsAllEdges) {
    auto space = SearchSpace::nb201();
    auto rng = rng_for(13);
    auto a = ArchParams::random(space, rng, 1.0);
    const auto g = derive_genotype(a, space);
    ASSERT_EQ(g.cell(CellKind::normal).size(), 3u);
    EXPECT_EQ(g.cell(CellKind::normal)[2].size(), 3u);
    EXPECT_TRUE(validate_genotype(g, space).empty());
}

TEST(Genotype, JsonRoundTripIsLossless) {
    auto space = SearchSpace::darts();
    auto rng = rng_for(14);
    for (int trial = 0; trial < 20; ++trial) {
        auto g = derive_genotype(ArchParams::random(space, rng, 1.0), space);
        const std::string s = genotype_to_string(g);
        const auto back = genotype_from_string(s);
        EXPECT_EQ(back, g);
        EXPECT_EQ(genotype_to_string(back), s);
    }
    const auto j = genotype_to_json(derive_genotype(ArchParams::zeros(space), space));
    EXPECT_TRUE(j.contains("schema_version"));
    EXPECT_EQ(j.at("cell_kinds").at("normal").size(), 4u);
    EXPECT_EQ(j.at("cell_kinds").at("normal")[0][0][0], "max_pool_3x3");
}

TEST(ValidateGenotype, ReportsEveryViolation) {
    auto space = SearchSpace::darts();
    auto g = derive_genotype(ArchParams::zeros(space), space);
    EXPECT_TRUE(validate_genotype(g, space).empty());
    auto bad = g;
    bad.cells[CellKind::normal][0][0].op = OpKind::none;
    bad.cells[CellKind::normal][1][1].predecessor = 3;
    bad.cells[CellKind::reduction][2][0].op = OpKind::conv_1x1;
    const auto v = validate_genotype(bad, space);
    EXPECT_EQ(v.size(), 3u);
    bool saw_none = false, saw_pred = false;
    for (const auto& s : v) {
        saw_none |= s.find("none") != std::string::npos;
        saw_pred |= s.find("predecessor 3") != std::string::npos;
    }
    EXPECT_TRUE(saw_none);
    EXPECT_TRUE(saw_pred);
}

TEST(ValidateGenotype, PairCountAndDuplicates) {
    auto space = SearchSpace::darts();
    auto g = derive_genotype(ArchParams::zeros(space), space);
    g.cells[CellKind::normal][2].pop_back();
    g.cells[CellKind::normal][3][1].predecessor = g.cells[CellKind::normal][3][0].predecessor;
    g.schema_version = 9;
    EXPECT_EQ(validate_genotype(g, space).size(), 3u);
}
