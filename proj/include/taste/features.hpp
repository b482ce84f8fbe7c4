#pragma once

// Feature schema and row encoding: one-hot / multi-hot vocabularies fitted on
// the train split, equal-width numeric binning, token fields, dense modal
// fields. Reserved index 0 = unknown/missing everywhere, so schemas fitted on
// train never error on val/test rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "taste/common.hpp"
#include "taste/dataio.hpp"
#include "taste/muqtoken.hpp"

namespace taste {

enum class FieldKind { categorical, multi_categorical, numeric, dense, token };
enum class FeatureSetting { id_only, id_categories, full };
enum class ModalKind { none, muq_dense, muq_token };
enum class DenseFusion { all_layers, mean_pool };
enum class FieldSource { user, item, modal };

inline const char* to_string(FeatureSetting s) {
    switch (s) {
        case FeatureSetting::id_only: return "id_only";
        case FeatureSetting::id_categories: return "id_categories";
        case FeatureSetting::full: return "full";
    }
    return "?";
}
inline const char* to_string(ModalKind m) {
    switch (m) {
        case ModalKind::none: return "none";
        case ModalKind::muq_dense: return "muq_dense";
        case ModalKind::muq_token: return "muq_token";
    }
    return "?";
}

struct NumericBinSpec {
    double x_min = 0.0;
    double x_max = 1.0;
    int64_t k = 10;
    double width() const { return (x_max - x_min) / static_cast<double>(k); }
};

// Bucket index in [0, k): floor((x - x_min)/w) clamped into range.
inline int64_t bin_numeric(double x, const NumericBinSpec& spec) {
    TASTE_CHECK(std::isfinite(x), Errc::non_finite_value, "bin_numeric of non-finite value");
    const double w = spec.width();
    const auto raw = static_cast<int64_t>(std::floor((x - spec.x_min) / w));
    return std::clamp<int64_t>(raw, 0, spec.k - 1);
}

// x * v; the linear alternative to hard discretization for numeric fields.
inline std::vector<double> field_embed_numeric(double x, const std::vector<double>& v) {
    TASTE_CHECK(std::isfinite(x), Errc::non_finite_value, "field_embed of non-finite value");
    std::vector<double> out(v);
    for (double& e : out) e *= x;
    return out;
}

struct FieldSpec {
    std::string name;
    FieldKind kind = FieldKind::categorical;
    FieldSource source = FieldSource::item;
    int64_t cardinality = 0;                 // categorical / multi / numeric / token
    int64_t dim = 0;                         // dense
    NumericBinSpec bins;                     // numeric
    std::map<std::string, int64_t> vocab;    // categorical / multi (1-based; 0 unknown)
    bool linear_no_bias = false;             // dense: map by bias-free linear layer
    int payload = 0;                         // slot within the kind's payload array
};

struct FeatureSchema {
    FeatureSetting setting = FeatureSetting::id_only;
    ModalKind modal = ModalKind::none;
    DenseFusion fusion = DenseFusion::mean_pool;
    bool include_text = true;
    int64_t token_layers = 0, token_k = 0;
    std::vector<FieldSpec> fields;
    int n_single = 0, n_multi = 0, n_dense = 0;

    const FieldSpec& field(const std::string& name) const {
        for (const auto& f : fields)
            if (f.name == name) return f;
        fail(Errc::missing_field, "no field named " + name);
    }
};

struct Instance {
    std::vector<int64_t> single;              // categorical, numeric-bucket, token fields
    std::vector<std::vector<int64_t>> multi;  // multi-hot index lists (sorted)
    std::vector<std::vector<double>> dense;   // dense payloads
    int label = 0;
};

struct SchemaConfig {
    FeatureSetting setting = FeatureSetting::id_only;
    ModalKind modal = ModalKind::none;
    DenseFusion fusion = DenseFusion::mean_pool;
    bool include_text = true;
    int64_t token_k = 16;
    int64_t numeric_bins = 10;
    // Numeric fields listed here use the field-embedding path (x * v)
    // instead of equal-width binning.
    std::set<std::string> field_embed_numerics;
};

namespace detail {

inline void assign_payload_slots(FeatureSchema& schema) {
    schema.n_single = schema.n_multi = schema.n_dense = 0;
    for (auto& f : schema.fields) {
        switch (f.kind) {
            case FieldKind::categorical:
            case FieldKind::numeric:
            case FieldKind::token:
                f.payload = schema.n_single++;
                break;
            case FieldKind::multi_categorical:
                f.payload = schema.n_multi++;
                break;
            case FieldKind::dense:
                f.payload = schema.n_dense++;
                break;
        }
    }
}

// Field-name discovery over a metadata table, restricted to the entities in
// `active`. Sorted for stable field order.
template <typename Fn>
std::vector<std::string> collect_field_names(const MetaTable& meta,
                                             const std::set<std::string>& active, Fn extract) {
    std::set<std::string> names;
    for (const auto& key : active) {
        auto it = meta.find(key);
        if (it == meta.end()) continue;
        for (const auto& [name, value] : extract(it->second)) {
            (void)value;
            names.insert(name);
        }
    }
    return {names.begin(), names.end()};
}

}  // namespace detail

// Fit the schema on the train split: vocabularies and bin ranges come from
// train entities only.
inline FeatureSchema build_schema(const MetaTable& user_meta, const MetaTable& item_meta,
                                  const std::vector<LabeledPair>& train_pairs,
                                  const std::vector<std::string>& user_keys,
                                  const std::vector<std::string>& item_keys,
                                  const LayeredEmbeddings* emb, const SchemaConfig& cfg) {
    FeatureSchema schema;
    schema.setting = cfg.setting;
    schema.modal = cfg.modal;
    schema.fusion = cfg.fusion;
    schema.include_text = cfg.include_text;

    FieldSpec user_id{.name = "user_id",
                      .kind = FieldKind::categorical,
                      .source = FieldSource::user,
                      .cardinality = static_cast<int64_t>(user_keys.size()) + 1};
    FieldSpec item_id{.name = "item_id",
                      .kind = FieldKind::categorical,
                      .source = FieldSource::item,
                      .cardinality = static_cast<int64_t>(item_keys.size()) + 1};
    schema.fields.push_back(std::move(user_id));
    schema.fields.push_back(std::move(item_id));

    std::set<std::string> train_users, train_items;
    for (const auto& p : train_pairs) {
        train_users.insert(user_keys[static_cast<size_t>(p.user)]);
        train_items.insert(item_keys[static_cast<size_t>(p.item)]);
    }

    auto add_meta_fields = [&](const MetaTable& meta, const std::set<std::string>& active,
                               FieldSource source, const std::string& prefix) {
        auto cat_names = detail::collect_field_names(
            meta, active, [](const EntityMeta& m) -> const auto& { return m.categorical; });
        auto multi_names = detail::collect_field_names(
            meta, active, [](const EntityMeta& m) -> const auto& { return m.multi; });
        auto num_names = detail::collect_field_names(
            meta, active, [](const EntityMeta& m) -> const auto& { return m.numeric; });

        if (cfg.setting == FeatureSetting::id_categories || cfg.setting == FeatureSetting::full) {
            for (const auto& name : cat_names) {
                FieldSpec f{.name = prefix + name,
                            .kind = FieldKind::categorical,
                            .source = source};
                std::set<std::string> values;
                for (const auto& key : active) {
                    auto it = meta.find(key);
                    if (it == meta.end()) continue;
                    auto vit = it->second.categorical.find(name);
                    if (vit != it->second.categorical.end()) values.insert(vit->second);
                }
                int64_t next = 1;
                for (const auto& v : values) f.vocab[v] = next++;
                f.cardinality = next;
                schema.fields.push_back(std::move(f));
            }
            for (const auto& name : multi_names) {
                FieldSpec f{.name = prefix + name,
                            .kind = FieldKind::multi_categorical,
                            .source = source};
                std::set<std::string> values;
                for (const auto& key : active) {
                    auto it = meta.find(key);
                    if (it == meta.end()) continue;
                    auto vit = it->second.multi.find(name);
                    if (vit != it->second.multi.end())
                        values.insert(vit->second.begin(), vit->second.end());
                }
                int64_t next = 1;
                for (const auto& v : values) f.vocab[v] = next++;
                f.cardinality = next;
                schema.fields.push_back(std::move(f));
            }
        }
        if (cfg.setting == FeatureSetting::full) {
            for (const auto& name : num_names) {
                if (cfg.field_embed_numerics.count(name) ||
                    cfg.field_embed_numerics.count(prefix + name)) {
                    schema.fields.push_back(FieldSpec{.name = prefix + name,
                                                      .kind = FieldKind::dense,
                                                      .source = source,
                                                      .dim = 1,
                                                      .linear_no_bias = true});
                    continue;
                }
                double lo = std::numeric_limits<double>::infinity();
                double hi = -std::numeric_limits<double>::infinity();
                for (const auto& key : active) {
                    auto it = meta.find(key);
                    if (it == meta.end()) continue;
                    auto vit = it->second.numeric.find(name);
                    if (vit != it->second.numeric.end()) {
                        lo = std::min(lo, vit->second);
                        hi = std::max(hi, vit->second);
                    }
                }
                TASTE_CHECK(std::isfinite(lo) && std::isfinite(hi), Errc::missing_field,
                            "numeric field " + name + " has no train values");
                if (hi <= lo) hi = lo + 1.0;  // degenerate observed range
                FieldSpec f{.name = prefix + name,
                            .kind = FieldKind::numeric,
                            .source = source,
                            .cardinality = cfg.numeric_bins + 1,  // 0 = missing
                            .bins = {lo, hi, cfg.numeric_bins}};
                schema.fields.push_back(std::move(f));
            }
        }
        return cat_names.size() + multi_names.size() + num_names.size();
    };

    if (cfg.setting != FeatureSetting::id_only) {
        TASTE_CHECK(!user_meta.empty() || !item_meta.empty(), Errc::missing_field,
                    "non-id_only setting requires metadata");
        size_t found = 0;
        found += add_meta_fields(user_meta, train_users, FieldSource::user, "u_");
        found += add_meta_fields(item_meta, train_items, FieldSource::item, "i_");
        TASTE_CHECK(found > 0, Errc::missing_field,
                    "setting requires metadata fields but none were observed");
    }

    if (cfg.modal == ModalKind::muq_token) {
        TASTE_CHECK(emb != nullptr, Errc::missing_modality, "muq_token requires embeddings");
        schema.token_layers = emb->L;
        schema.token_k = cfg.token_k;
        for (int64_t l = 0; l < emb->L; ++l)
            schema.fields.push_back(FieldSpec{.name = "tok_" + std::to_string(l),
                                              .kind = FieldKind::token,
                                              .source = FieldSource::modal,
                                              .cardinality = cfg.token_k + 1});
    } else if (cfg.modal == ModalKind::muq_dense) {
        TASTE_CHECK(emb != nullptr, Errc::missing_modality, "muq_dense requires embeddings");
        if (cfg.fusion == DenseFusion::all_layers) {
            for (int64_t l = 0; l < emb->L; ++l)
                schema.fields.push_back(FieldSpec{.name = "audio_" + std::to_string(l),
                                                  .kind = FieldKind::dense,
                                                  .source = FieldSource::modal,
                                                  .dim = emb->H});
        } else {
            schema.fields.push_back(FieldSpec{.name = "audio_mean",
                                              .kind = FieldKind::dense,
                                              .source = FieldSource::modal,
                                              .dim = emb->H});
        }
    }
    if (cfg.modal != ModalKind::none && cfg.include_text && emb != nullptr && emb->d_text > 0) {
        schema.fields.push_back(FieldSpec{.name = "text",
                                          .kind = FieldKind::dense,
                                          .source = FieldSource::modal,
                                          .dim = emb->d_text});
    }

    detail::assign_payload_slots(schema);
    return schema;
}

// ---------------------------------------------------------------------------
// Row encoding. Pure and total over schema-conformant rows.

inline Instance encode_row(const FeatureSchema& schema, const LabeledPair& pair,
                           const std::vector<std::string>& user_keys,
                           const std::vector<std::string>& item_keys, const MetaTable& user_meta,
                           const MetaTable& item_meta, const TokenTable* tokens,
                           const LayeredEmbeddings* emb) {
    Instance inst;
    inst.single.assign(static_cast<size_t>(schema.n_single), 0);
    inst.multi.resize(static_cast<size_t>(schema.n_multi));
    inst.dense.resize(static_cast<size_t>(schema.n_dense));
    inst.label = pair.label;

    const std::string& user_key = user_keys[static_cast<size_t>(pair.user)];
    const std::string& item_key = item_keys[static_cast<size_t>(pair.item)];
    auto meta_of = [&](FieldSource src) -> const EntityMeta* {
        const MetaTable& table = src == FieldSource::user ? user_meta : item_meta;
        auto it = table.find(src == FieldSource::user ? user_key : item_key);
        return it == table.end() ? nullptr : &it->second;
    };
    auto strip_prefix = [](const std::string& name) { return name.substr(2); };

    for (const auto& f : schema.fields) {
        switch (f.kind) {
            case FieldKind::categorical: {
                if (f.name == "user_id") {
                    inst.single[f.payload] = pair.user + 1;
                    break;
                }
                if (f.name == "item_id") {
                    inst.single[f.payload] = pair.item + 1;
                    break;
                }
                int64_t idx = 0;
                if (const EntityMeta* m = meta_of(f.source)) {
                    auto it = m->categorical.find(strip_prefix(f.name));
                    if (it != m->categorical.end()) {
                        auto vit = f.vocab.find(it->second);
                        if (vit != f.vocab.end()) idx = vit->second;
                    }
                }
                inst.single[f.payload] = idx;
                break;
            }
            case FieldKind::multi_categorical: {
                std::vector<int64_t>& out = inst.multi[f.payload];
                if (const EntityMeta* m = meta_of(f.source)) {
                    auto it = m->multi.find(strip_prefix(f.name));
                    if (it != m->multi.end()) {
                        for (const auto& v : it->second) {
                            auto vit = f.vocab.find(v);
                            out.push_back(vit == f.vocab.end() ? 0 : vit->second);
                        }
                        std::sort(out.begin(), out.end());
                        out.erase(std::unique(out.begin(), out.end()), out.end());
                    }
                }
                break;
            }
            case FieldKind::numeric: {
                int64_t idx = 0;  // reserved: missing value
                if (const EntityMeta* m = meta_of(f.source)) {
                    auto it = m->numeric.find(strip_prefix(f.name));
                    if (it != m->numeric.end()) idx = 1 + bin_numeric(it->second, f.bins);
                }
                inst.single[f.payload] = idx;
                break;
            }
            case FieldKind::token: {
                TASTE_CHECK(tokens != nullptr && tokens->has(pair.item), Errc::missing_modality,
                            "item " + item_key + " has no tokens");
                const int64_t layer = std::stoll(f.name.substr(4));
                inst.single[f.payload] = tokens->at(pair.item, layer) + 1;
                break;
            }
            case FieldKind::dense: {
                std::vector<double>& out = inst.dense[f.payload];
                if (f.source == FieldSource::modal) {
                    TASTE_CHECK(emb != nullptr && emb->has(pair.item), Errc::missing_modality,
                                "item " + item_key + " has no embedding");
                    if (f.name == "text") {
                        const float* src = emb->text_at(pair.item);
                        out.assign(src, src + emb->d_text);
                    } else if (f.name == "audio_mean") {
                        out.assign(static_cast<size_t>(emb->H), 0.0);
                        for (int64_t l = 0; l < emb->L; ++l) {
                            const float* src = emb->audio_at(pair.item) + l * emb->H;
                            for (int64_t h = 0; h < emb->H; ++h) out[static_cast<size_t>(h)] += src[h];
                        }
                        for (double& v : out) v /= static_cast<double>(emb->L);
                    } else {  // audio_<layer>
                        const int64_t layer = std::stoll(f.name.substr(6));
                        const float* src = emb->audio_at(pair.item) + layer * emb->H;
                        out.assign(src, src + emb->H);
                    }
                } else {
                    // Field-embedded numeric: payload is the raw value (0 when missing).
                    double x = 0.0;
                    if (const EntityMeta* m = meta_of(f.source)) {
                        auto it = m->numeric.find(strip_prefix(f.name));
                        if (it != m->numeric.end()) x = it->second;
                    }
                    TASTE_CHECK(std::isfinite(x), Errc::non_finite_value,
                                "non-finite numeric value in field " + f.name);
                    out.assign(1, x);
                }
                break;
            }
        }
    }
    return inst;
}

// ---------------------------------------------------------------------------
// Schema persistence (JSON), so train/serve encodings are bit-identical.

inline nlohmann::json schema_to_json(const FeatureSchema& s) {
    nlohmann::json j;
    j["setting"] = static_cast<int>(s.setting);
    j["modal"] = static_cast<int>(s.modal);
    j["fusion"] = static_cast<int>(s.fusion);
    j["include_text"] = s.include_text;
    j["token_layers"] = s.token_layers;
    j["token_k"] = s.token_k;
    nlohmann::json fields = nlohmann::json::array();
    for (const auto& f : s.fields) {
        nlohmann::json fj;
        fj["name"] = f.name;
        fj["kind"] = static_cast<int>(f.kind);
        fj["source"] = static_cast<int>(f.source);
        fj["cardinality"] = f.cardinality;
        fj["dim"] = f.dim;
        fj["linear_no_bias"] = f.linear_no_bias;
        fj["bins"] = {{"x_min", f.bins.x_min}, {"x_max", f.bins.x_max}, {"k", f.bins.k}};
        fj["vocab"] = f.vocab;
        fields.push_back(std::move(fj));
    }
    j["fields"] = std::move(fields);
    return j;
}

inline FeatureSchema schema_from_json(const nlohmann::json& j) {
    FeatureSchema s;
    s.setting = static_cast<FeatureSetting>(j["setting"].get<int>());
    s.modal = static_cast<ModalKind>(j["modal"].get<int>());
    s.fusion = static_cast<DenseFusion>(j["fusion"].get<int>());
    s.include_text = j["include_text"].get<bool>();
    s.token_layers = j["token_layers"].get<int64_t>();
    s.token_k = j["token_k"].get<int64_t>();
    for (const auto& fj : j["fields"]) {
        FieldSpec f;
        f.name = fj["name"].get<std::string>();
        f.kind = static_cast<FieldKind>(fj["kind"].get<int>());
        f.source = static_cast<FieldSource>(fj["source"].get<int>());
        f.cardinality = fj["cardinality"].get<int64_t>();
        f.dim = fj["dim"].get<int64_t>();
        f.linear_no_bias = fj["linear_no_bias"].get<bool>();
        f.bins = {fj["bins"]["x_min"].get<double>(), fj["bins"]["x_max"].get<double>(),
                  fj["bins"]["k"].get<int64_t>()};
        f.vocab = fj["vocab"].get<std::map<std::string, int64_t>>();
        s.fields.push_back(std::move(f));
    }
    detail::assign_payload_slots(s);
    return s;
}

inline uint64_t schema_hash(const FeatureSchema& s) { return fnv1a64(schema_to_json(s).dump()); }

}  // namespace taste
