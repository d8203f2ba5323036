#pragma once

// JSON (de)serialization of fitted learners. Oracle-backed models are
// in-process constructions and deliberately refuse to serialize.

#include <json.hpp>

#include "rtcp/learners.hpp"

namespace rtcp {

using json = nlohmann::json;

inline json learner_to_json(const Learner& m);

namespace detail_ser {

inline json tree_to_json(const Tree& t) {
    json nodes = json::array();
    for (const auto& nd : t.nodes)
        nodes.push_back({nd.feature, nd.threshold, nd.left, nd.right, nd.value});
    return nodes;
}

inline Tree tree_from_json(const json& j) {
    Tree t;
    for (const auto& nj : j) {
        TreeNode nd;
        nd.feature = nj.at(0).get<int>();
        nd.threshold = nj.at(1).get<double>();
        nd.left = nj.at(2).get<int>();
        nd.right = nj.at(3).get<int>();
        nd.value = nj.at(4).get<double>();
        t.nodes.push_back(nd);
    }
    return t;
}

}  // namespace detail_ser

inline json learner_to_json(const Learner& m) {
    const std::string kind = m.kind();
    if (kind == "linear" || kind == "logistic") {
        const auto& lm = dynamic_cast<const LinearModel&>(m);
        return {{"kind", kind},
                {"coef", lm.coef},
                {"intercept", lm.intercept},
                {"lambda", lm.lambda}};
    }
    if (kind == "gbt") {
        const auto& gm = dynamic_cast<const GbtModel&>(m);
        json trees = json::array();
        for (const auto& t : gm.fit.trees) trees.push_back(detail_ser::tree_to_json(t));
        return {{"kind", "gbt"},
                {"dim", gm.dim},
                {"loss", static_cast<int>(gm.fit.loss)},
                {"base", gm.fit.base_score},
                {"rate", gm.fit.learning_rate},
                {"pinball_alpha", gm.fit.pinball_alpha},
                {"trees", trees}};
    }
    if (kind == "stack") {
        const auto& sm = dynamic_cast<const StackModel&>(m);
        json bases = json::array();
        for (const auto& b : sm.bases) bases.push_back(learner_to_json(*b));
        return {{"kind", "stack"},
                {"dim", sm.dim},
                {"weights", sm.weights},
                {"cv_loss", sm.cv_loss},
                {"base_cv_losses", sm.base_cv_losses},
                {"bases", bases}};
    }
    if (kind == "constant") {
        const auto& cm = dynamic_cast<const ConstantModel&>(m);
        return {{"kind", "constant"}, {"dim", cm.dim}, {"value", cm.value}};
    }
    if (kind == "clamped") {
        const auto& cm = dynamic_cast<const ClampedModel&>(m);
        return {{"kind", "clamped"},
                {"lo", cm.lo},
                {"hi", cm.hi},
                {"inner", learner_to_json(*cm.inner)}};
    }
    throw DataError("model kind '" + kind + "' is not serializable");
}

inline LearnerModel learner_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear" || kind == "logistic") {
        auto m = std::make_shared<LinearModel>();
        m->coef = j.at("coef").get<std::vector<double>>();
        m->intercept = j.at("intercept").get<double>();
        m->lambda = j.at("lambda").get<double>();
        m->logistic = kind == "logistic";
        return m;
    }
    if (kind == "gbt") {
        auto m = std::make_shared<GbtModel>();
        m->dim = j.at("dim").get<std::size_t>();
        m->fit.loss = static_cast<GbtLoss>(j.at("loss").get<int>());
        m->fit.base_score = j.at("base").get<double>();
        m->fit.learning_rate = j.at("rate").get<double>();
        m->fit.pinball_alpha = j.at("pinball_alpha").get<double>();
        for (const auto& tj : j.at("trees"))
            m->fit.trees.push_back(detail_ser::tree_from_json(tj));
        return m;
    }
    if (kind == "stack") {
        auto m = std::make_shared<StackModel>();
        m->dim = j.at("dim").get<std::size_t>();
        m->weights = j.at("weights").get<std::vector<double>>();
        m->cv_loss = j.value("cv_loss", 0.0);
        m->base_cv_losses = j.value("base_cv_losses", std::vector<double>{});
        for (const auto& bj : j.at("bases")) m->bases.push_back(learner_from_json(bj));
        return m;
    }
    if (kind == "constant") {
        auto m = std::make_shared<ConstantModel>();
        m->dim = j.at("dim").get<std::size_t>();
        m->value = j.at("value").get<double>();
        return m;
    }
    if (kind == "clamped") {
        auto m = std::make_shared<ClampedModel>();
        m->lo = j.at("lo").get<double>();
        m->hi = j.at("hi").get<double>();
        m->inner = learner_from_json(j.at("inner"));
        return m;
    }
    throw DataError("unknown model kind '" + kind + "' in bundle");
}

}  // namespace rtcp
