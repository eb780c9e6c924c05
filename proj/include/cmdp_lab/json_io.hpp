#pragma once

#include <array>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace cmdp {

using json = nlohmann::json;

/// "h,s,a" key used by every table in the JSON documents.
inline std::string hsa_key(std::size_t h, std::size_t s, std::size_t a) {
    return std::to_string(h) + "," + std::to_string(s) + "," + std::to_string(a);
}

inline std::array<std::size_t, 3> parse_hsa_key(const std::string& key) {
    std::array<std::size_t, 3> out{};
    std::istringstream in(key);
    char c1 = 0, c2 = 0;
    if (!(in >> out[0] >> c1 >> out[1] >> c2 >> out[2]) || c1 != ',' || c2 != ',' || !in.eof())
        throw ConfigError("malformed table key '" + key + "', expected \"h,s,a\"");
    return out;
}

namespace detail {

inline json transitions_json(const LayeredMdp& m) {
    json t = json::object();
    const Layout& L = m.layout();
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) {
                const auto row = m.transition(h, s, a);
                t[hsa_key(h, s, a)] = std::vector<double>(row.begin(), row.end());
            }
    return t;
}

inline json rewards_json(const LayeredMdp& m) {
    json r = json::object();
    const Layout& L = m.layout();
    for (std::size_t h = 0; h < L.horizon(); ++h)
        for (std::size_t s = 0; s < L.layer_size(h); ++s)
            for (std::size_t a = 0; a < L.num_actions(); ++a) r[hsa_key(h, s, a)] = m.reward(h, s, a);
    return r;
}

inline void fill_transitions(LayeredMdp& m, const json& table) {
    for (auto it = table.begin(); it != table.end(); ++it) {
        const auto [h, s, a] = parse_hsa_key(it.key());
        const auto row = it.value().get<std::vector<double>>();
        m.set_transition(h, s, a, row);
    }
}

inline void fill_rewards(LayeredMdp& m, const json& table) {
    for (auto it = table.begin(); it != table.end(); ++it) {
        const auto [h, s, a] = parse_hsa_key(it.key());
        m.set_reward(h, s, a, it.value().get<double>());
    }
}

}  // namespace detail

/**
Serializes a finite CMDP:

    {layers:[[ids]], actions:[ids], horizon, context_dim, noise,
     contexts:[{id, vector, prob}],
     transitions:{"*" | id : {"h,s,a":[probs]}},
     rewards:{id : {"h,s,a": mean}}}

Doubles are written in shortest round-trip form, so load followed by save
reproduces the same decimals.
*/
inline json cmdp_to_json(const Cmdp& cmdp) {
    if (!cmdp.is_finite()) throw InfiniteContextSpace("only finite context spaces can be serialized");
    const Layout& L = cmdp.layout();
    json doc;
    json layers = json::array();
    for (std::size_t h = 0; h <= L.horizon(); ++h) {
        json ids = json::array();
        for (std::size_t s = 0; s < L.layer_size(h); ++s) ids.push_back(s);
        layers.push_back(ids);
    }
    doc["layers"] = layers;
    json actions = json::array();
    for (std::size_t a = 0; a < L.num_actions(); ++a) actions.push_back(a);
    doc["actions"] = actions;
    doc["horizon"] = L.horizon();
    doc["context_dim"] = cmdp.context_dim();
    doc["noise"] = cmdp.noise().name();

    json contexts = json::array();
    json transitions = json::object();
    json rewards = json::object();
    for (std::size_t i = 0; i < cmdp.contexts().size(); ++i) {
        const Context& c = cmdp.contexts()[i];
        contexts.push_back({{"id", i}, {"vector", c.x}, {"prob", cmdp.probabilities()[i]}});
        const auto m = cmdp.mdp_of(c);
        if (!cmdp.context_free_dynamics()) transitions[std::to_string(i)] = detail::transitions_json(*m);
        rewards[std::to_string(i)] = detail::rewards_json(*m);
    }
    if (cmdp.context_free_dynamics()) transitions["*"] = detail::transitions_json(*cmdp.mdp_of(cmdp.contexts().front()));
    doc["contexts"] = contexts;
    doc["transitions"] = transitions;
    doc["rewards"] = rewards;
    return doc;
}

inline Cmdp cmdp_from_json(const json& doc) {
    try {
        std::vector<std::size_t> sizes;
        for (const auto& layer : doc.at("layers")) sizes.push_back(layer.size());
        const std::size_t A = doc.at("actions").size();
        Layout layout(sizes, A);
        if (doc.contains("horizon") && doc.at("horizon").get<std::size_t>() != layout.horizon())
            throw ConfigError("horizon does not match the number of layers");
        RewardNoise noise;
        if (doc.contains("noise")) noise = RewardNoise::parse(doc.at("noise").get<std::string>());

        std::vector<Context> contexts;
        std::vector<double> probs;
        std::vector<std::string> keys;
        for (const auto& c : doc.at("contexts")) {
            Context ctx;
            ctx.x = c.at("vector").get<std::vector<double>>();
            contexts.push_back(ctx);
            probs.push_back(c.at("prob").get<double>());
            keys.push_back(c.at("id").is_string() ? c.at("id").get<std::string>()
                                                  : std::to_string(c.at("id").get<long long>()));
        }

        const json& trans = doc.at("transitions");
        const bool context_free = trans.contains("*");
        std::vector<std::shared_ptr<const LayeredMdp>> mdps;
        for (std::size_t i = 0; i < contexts.size(); ++i) {
            LayeredMdp m(layout);
            detail::fill_transitions(m, context_free ? trans.at("*") : trans.at(keys[i]));
            const json& rew = doc.at("rewards");
            if (rew.contains(keys[i])) detail::fill_rewards(m, rew.at(keys[i]));
            mdps.push_back(std::make_shared<const LayeredMdp>(std::move(m)));
        }
        return Cmdp(layout, std::move(contexts), std::move(probs), std::move(mdps), context_free, noise);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed CMDP document: ") + e.what());
    }
}

inline std::string cmdp_to_string(const Cmdp& cmdp) { return cmdp_to_json(cmdp).dump(2); }

inline Cmdp cmdp_from_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("CMDP document is not valid JSON: ") + e.what());
    }
    return cmdp_from_json(doc);
}

}  // namespace cmdp
