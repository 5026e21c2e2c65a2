#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "mgec/io.hpp"
#include "mgec/models.hpp"

namespace mgec {

namespace ioutil {

inline nlohmann::json mlp_to_json(const MlpParams& p) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& lay : p.layers) {
        nlohmann::json j;
        j["act"] = lay.act == Activation::relu ? "relu" : "identity";
        j["w"] = matrix_to_json(lay.w);
        j["b"] = lay.b;
        layers.push_back(std::move(j));
    }
    return layers;
}

inline MlpParams mlp_from_json(const nlohmann::json& j, const std::string& context) {
    MlpParams p;
    for (const auto& lj : j) {
        DenseLayer lay;
        const auto act = lj.at("act").get<std::string>();
        if (act == "relu") lay.act = Activation::relu;
        else if (act == "identity") lay.act = Activation::identity;
        else throw ParseError(context + ": unknown activation '" + act + "'");
        lay.w = matrix_from_json(lj.at("w"), context);
        lay.b = lj.at("b").get<std::vector<double>>();
        p.layers.push_back(std::move(lay));
    }
    p.validate();
    return p;
}

} // namespace ioutil

inline nlohmann::json model_pair_to_json(const ModelPair& pair) {
    nlohmann::json j;
    if (pair.shared) {
        j["shared"] = {{"extractor", ioutil::mlp_to_json(pair.shared->extractor)},
                       {"head", ioutil::mlp_to_json(pair.shared->head)}};
    }
    if (pair.routed) {
        nlohmann::json experts = nlohmann::json::array();
        for (const auto& e : pair.routed->experts) experts.push_back(ioutil::mlp_to_json(e));
        j["routed"] = {{"extractor", ioutil::mlp_to_json(pair.routed->extractor)},
                       {"router",
                        {{"projection", ioutil::matrix_to_json(pair.routed->router.projection)},
                         {"prototypes", ioutil::matrix_to_json(pair.routed->router.prototypes)},
                         {"top_k", pair.routed->router.top_k}}},
                       {"experts", std::move(experts)}};
    }
    return j;
}

inline ModelPair model_pair_from_json(const nlohmann::json& j, const std::string& context) {
    ModelPair pair;
    if (j.contains("shared")) {
        SharedModel m;
        m.extractor = ioutil::mlp_from_json(j.at("shared").at("extractor"), context);
        m.head = ioutil::mlp_from_json(j.at("shared").at("head"), context);
        m.validate();
        pair.shared = std::move(m);
    }
    if (j.contains("routed")) {
        RoutedModel m;
        const auto& rj = j.at("routed");
        m.extractor = ioutil::mlp_from_json(rj.at("extractor"), context);
        m.router.projection = ioutil::matrix_from_json(rj.at("router").at("projection"), context);
        m.router.prototypes = ioutil::matrix_from_json(rj.at("router").at("prototypes"), context);
        m.router.top_k = rj.at("router").at("top_k").get<std::size_t>();
        for (const auto& e : rj.at("experts")) m.experts.push_back(ioutil::mlp_from_json(e, context));
        m.validate();
        pair.routed = std::move(m);
    }
    return pair;
}

// Single JSON document: config echo, both models as nested float arrays, and
// run metadata. Doubles are printed shortest-round-trip so a reload
// reproduces validation metrics bitwise.
inline void save_checkpoint(const std::filesystem::path& path, const ModelPair& pair,
                            const nlohmann::json& config, const nlohmann::json& metadata) {
    nlohmann::json j;
    j["format"] = "mgec-checkpoint-v1";
    j["config"] = config;
    j["models"] = model_pair_to_json(pair);
    j["metadata"] = metadata;
    ioutil::write_text_file(path, j.dump(2) + "\n");
}

struct Checkpoint {
    ModelPair models;
    nlohmann::json config;
    nlohmann::json metadata;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto j = ioutil::load_json_file(path);
    if (!j.contains("format") || j.at("format").get<std::string>() != "mgec-checkpoint-v1")
        throw ParseError(path.string() + ": not an mgec checkpoint");
    Checkpoint c;
    c.models = model_pair_from_json(j.at("models"), path.string());
    c.config = j.value("config", nlohmann::json::object());
    c.metadata = j.value("metadata", nlohmann::json::object());
    return c;
}

} // namespace mgec
