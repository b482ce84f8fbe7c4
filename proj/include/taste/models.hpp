#pragma once

// CTR model family (LR, FM, FFM, AFM, Wide&Deep, DeepFM, DCNv2-style cross
// network) and recall models (BPR, VBPR) on the tensor engine. Dense modal
// fields pass through an adaptor MLP and join the field list; token fields
// embed like any categorical field.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "taste/common.hpp"
#include "taste/features.hpp"
#include "taste/tensor.hpp"

namespace taste {

enum class CtrKind { lr, fm, ffm, afm, wide_deep, deepfm, dcnv2 };

inline const char* to_string(CtrKind k) {
    switch (k) {
        case CtrKind::lr: return "lr";
        case CtrKind::fm: return "fm";
        case CtrKind::ffm: return "ffm";
        case CtrKind::afm: return "afm";
        case CtrKind::wide_deep: return "wide_deep";
        case CtrKind::deepfm: return "deepfm";
        case CtrKind::dcnv2: return "dcnv2";
    }
    return "?";
}

inline CtrKind ctr_kind_from(const std::string& s) {
    if (s == "lr") return CtrKind::lr;
    if (s == "fm") return CtrKind::fm;
    if (s == "ffm") return CtrKind::ffm;
    if (s == "afm") return CtrKind::afm;
    if (s == "wide_deep") return CtrKind::wide_deep;
    if (s == "deepfm") return CtrKind::deepfm;
    if (s == "dcnv2") return CtrKind::dcnv2;
    fail(Errc::config_error, "unknown CTR model kind '" + s + "'");
}

struct CtrHyper {
    int64_t d = 16;                       // embedding size
    std::vector<int64_t> mlp = {64, 32};  // deep tower hidden sizes
    int cross_depth = 2;                  // dcnv2
    int64_t attention_dim = 0;            // afm; 0 means d
    std::vector<int64_t> adaptor_hidden = {32};  // dense adaptor MLP hidden sizes
    double l2 = 1e-6;                     // embedding-table L2 coefficient
};

// Named parameters in stable creation order; optimizer state aligns by index.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    std::map<std::string, size_t> index;

    Tensor& add(const std::string& name, Tensor t) {
        TASTE_CHECK(!index.count(name), Errc::config_error, "duplicate parameter " + name);
        index[name] = tensors.size();
        names.push_back(name);
        tensors.push_back(std::move(t));
        return tensors.back();
    }
    Tensor& at(const std::string& name) {
        auto it = index.find(name);
        TASTE_CHECK(it != index.end(), Errc::config_error, "no parameter " + name);
        return tensors[it->second];
    }
    const Tensor& at(const std::string& name) const {
        auto it = index.find(name);
        TASTE_CHECK(it != index.end(), Errc::config_error, "no parameter " + name);
        return tensors[it->second];
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }
    void zero_grads() {
        for (auto& t : tensors) t.zero_grad();
    }
    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        out.reserve(tensors.size());
        for (const auto& t : tensors) out.push_back(t.values());
        return out;
    }
    void restore(const std::vector<std::vector<double>>& snap) {
        TASTE_CHECK(snap.size() == tensors.size(), Errc::shape_error, "snapshot size mismatch");
        for (size_t i = 0; i < snap.size(); ++i) tensors[i].values() = snap[i];
    }
};

namespace detail {

inline Tensor init_normal(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor init_glorot(int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    return init_normal({fan_in, fan_out}, s, rng);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Mini-batch payload assembled from encoded instances.

struct Batch {
    int64_t size = 0;
    uint64_t schema_id = 0;                           // hash of the encoding schema
    std::vector<std::vector<int64_t>> single;         // per single slot
    std::vector<std::vector<int64_t>> multi_flat;     // per multi slot
    std::vector<std::vector<int64_t>> multi_offsets;  // per multi slot, size+1
    std::vector<Tensor> dense;                        // per dense slot, (B, dim)
    Tensor labels;                                    // (B, 1)
};

inline Batch make_batch(const FeatureSchema& schema, const std::vector<Instance>& rows,
                        const std::vector<size_t>& which) {
    Batch b;
    b.size = static_cast<int64_t>(which.size());
    b.schema_id = schema_hash(schema);
    b.single.resize(static_cast<size_t>(schema.n_single));
    b.multi_flat.resize(static_cast<size_t>(schema.n_multi));
    b.multi_offsets.assign(static_cast<size_t>(schema.n_multi), {0});
    std::vector<int64_t> dense_dims(static_cast<size_t>(schema.n_dense), 0);
    for (const auto& f : schema.fields)
        if (f.kind == FieldKind::dense) dense_dims[f.payload] = f.dim;
    std::vector<std::vector<double>> dense_vals(static_cast<size_t>(schema.n_dense));
    for (int s = 0; s < schema.n_dense; ++s)
        dense_vals[s].reserve(which.size() * static_cast<size_t>(dense_dims[s]));
    std::vector<double> labels;
    labels.reserve(which.size());
    for (size_t idx : which) {
        const Instance& inst = rows[idx];
        for (int s = 0; s < schema.n_single; ++s) b.single[s].push_back(inst.single[s]);
        for (int s = 0; s < schema.n_multi; ++s) {
            auto& flat = b.multi_flat[s];
            flat.insert(flat.end(), inst.multi[s].begin(), inst.multi[s].end());
            b.multi_offsets[s].push_back(static_cast<int64_t>(flat.size()));
        }
        for (int s = 0; s < schema.n_dense; ++s)
            dense_vals[s].insert(dense_vals[s].end(), inst.dense[s].begin(), inst.dense[s].end());
        labels.push_back(inst.label);
    }
    for (int s = 0; s < schema.n_dense; ++s)
        b.dense.push_back(Tensor({b.size, dense_dims[s]}, std::move(dense_vals[s])));
    b.labels = Tensor({b.size, 1}, std::move(labels));
    return b;
}

// ---------------------------------------------------------------------------
// CTR models

struct CtrModel {
    CtrKind kind = CtrKind::fm;
    FeatureSchema schema;
    uint64_t schema_id = 0;
    CtrHyper hyper;
    ParamStore params;
    // Names of embedding tables the L2 penalty applies to.
    std::vector<std::string> l2_params;
};

namespace detail {

inline bool has_first_order(CtrKind kind) {
    return kind == CtrKind::lr || kind == CtrKind::fm || kind == CtrKind::ffm ||
           kind == CtrKind::afm || kind == CtrKind::wide_deep || kind == CtrKind::deepfm;
}

inline bool has_field_embeddings(CtrKind kind) {
    return kind != CtrKind::lr && kind != CtrKind::ffm;
}

// The adaptor for a dense field. Shared across audio_<l> fields, per-field
// otherwise; "audio" is the shared prefix.
inline std::string adaptor_prefix(const FieldSpec& f) {
    if (f.name.rfind("audio_", 0) == 0) return "adaptor/audio";
    return "adaptor/" + f.name;
}

inline void add_adaptor_params(CtrModel& m, const FieldSpec& f, Rng& rng) {
    const std::string prefix = detail::adaptor_prefix(f);
    if (m.params.has(prefix + "/w0")) return;  // shared adaptor already created
    if (f.linear_no_bias) {
        m.params.add(prefix + "/w0", detail::init_glorot(f.dim, m.hyper.d, rng));
        return;
    }
    int64_t in = f.dim;
    size_t li = 0;
    for (int64_t h : m.hyper.adaptor_hidden) {
        m.params.add(prefix + "/w" + std::to_string(li), detail::init_glorot(in, h, rng));
        m.params.add(prefix + "/b" + std::to_string(li), Tensor::zeros({1, h}, true));
        in = h;
        ++li;
    }
    m.params.add(prefix + "/w" + std::to_string(li), detail::init_glorot(in, m.hyper.d, rng));
    m.params.add(prefix + "/b" + std::to_string(li), Tensor::zeros({1, m.hyper.d}, true));
}

inline void add_mlp_params(CtrModel& m, const std::string& prefix, int64_t in,
                           const std::vector<int64_t>& hidden, int64_t out, Rng& rng) {
    size_t li = 0;
    for (int64_t h : hidden) {
        m.params.add(prefix + "/w" + std::to_string(li), detail::init_glorot(in, h, rng));
        m.params.add(prefix + "/b" + std::to_string(li), Tensor::zeros({1, h}, true));
        in = h;
        ++li;
    }
    if (out > 0) {
        m.params.add(prefix + "/w" + std::to_string(li), detail::init_glorot(in, out, rng));
        m.params.add(prefix + "/b" + std::to_string(li), Tensor::zeros({1, out}, true));
    }
}

}  // namespace detail

inline CtrModel make_ctr_model(CtrKind kind, const FeatureSchema& schema, const CtrHyper& hyper,
                               uint64_t seed) {
    CtrModel m;
    m.kind = kind;
    m.schema = schema;
    m.schema_id = schema_hash(schema);
    m.hyper = hyper;
    if (m.hyper.attention_dim == 0) m.hyper.attention_dim = m.hyper.d;
    Rng rng(mix_seed(seed, 0x6d6f64656cull));

    m.params.add("w0", Tensor::zeros({1, 1}, true));
    const int64_t d = m.hyper.d;

    // Count fields that contribute an embedding vector (every field does: the
    // dense ones via an adaptor).
    const auto n_fields = static_cast<int64_t>(schema.fields.size());

    if (detail::has_first_order(kind)) {
        for (const auto& f : schema.fields) {
            if (f.kind == FieldKind::dense) {
                m.params.add("first/" + f.name + "/w", Tensor::zeros({f.dim, 1}, true));
            } else {
                m.params.add("first/" + f.name, Tensor::zeros({f.cardinality, 1}, true));
            }
        }
    }
    if (detail::has_field_embeddings(kind)) {
        for (const auto& f : schema.fields) {
            if (f.kind == FieldKind::dense) {
                detail::add_adaptor_params(m, f, rng);
            } else {
                auto& t = m.params.add("emb/" + f.name, detail::init_normal({f.cardinality, d}, 0.01, rng));
                (void)t;
                m.l2_params.push_back("emb/" + f.name);
            }
        }
    }
    if (kind == CtrKind::ffm) {
        for (const auto& f : schema.fields) {
            if (f.kind == FieldKind::dense) {
                detail::add_adaptor_params(m, f, rng);
                continue;
            }
            for (const auto& g : schema.fields) {
                if (g.name == f.name) continue;
                const std::string name = "ffm/" + f.name + "/" + g.name;
                m.params.add(name, detail::init_normal({f.cardinality, d}, 0.01, rng));
                m.l2_params.push_back(name);
            }
        }
    }
    if (kind == CtrKind::afm) {
        const int64_t a = m.hyper.attention_dim;
        m.params.add("afm/W", detail::init_glorot(d, a, rng));
        m.params.add("afm/b", Tensor::zeros({1, a}, true));
        m.params.add("afm/h", detail::init_glorot(a, 1, rng));
        m.params.add("afm/p", detail::init_glorot(d, 1, rng));
    }
    if (kind == CtrKind::wide_deep || kind == CtrKind::deepfm) {
        detail::add_mlp_params(m, "mlp", n_fields * d, m.hyper.mlp, 1, rng);
    }
    if (kind == CtrKind::dcnv2) {
        const int64_t D = n_fields * d;
        for (int l = 0; l < m.hyper.cross_depth; ++l) {
            m.params.add("cross/w" + std::to_string(l), detail::init_glorot(D, D, rng));
            m.params.add("cross/b" + std::to_string(l), Tensor::zeros({1, D}, true));
        }
        detail::add_mlp_params(m, "deep", D, m.hyper.mlp, 0, rng);
        const int64_t deep_out = m.hyper.mlp.empty() ? D : m.hyper.mlp.back();
        m.params.add("final/w", detail::init_glorot(D + deep_out, 1, rng));
        m.params.add("final/b", Tensor::zeros({1, 1}, true));
    }
    return m;
}

namespace detail {

inline Tensor dense_adaptor(CtrModel& m, const FieldSpec& f, const Tensor& input) {
    const std::string prefix = adaptor_prefix(f);
    if (f.linear_no_bias) return matmul(input, m.params.at(prefix + "/w0"));
    Tensor x = input;
    const size_t n_layers = m.hyper.adaptor_hidden.size() + 1;
    for (size_t li = 0; li < n_layers; ++li) {
        x = add(matmul(x, m.params.at(prefix + "/w" + std::to_string(li))),
                m.params.at(prefix + "/b" + std::to_string(li)));
        if (li + 1 < n_layers) x = relu(x);
    }
    return x;
}

// Per-field embedding vectors, (B, d) each. Multi-hot fields sum their active
// rows (the multi-hot times embedding-matrix product).
inline std::vector<Tensor> field_embeddings(CtrModel& m, const Batch& batch) {
    std::vector<Tensor> out;
    out.reserve(m.schema.fields.size());
    for (const auto& f : m.schema.fields) {
        switch (f.kind) {
            case FieldKind::categorical:
            case FieldKind::numeric:
            case FieldKind::token:
                out.push_back(gather_rows(m.params.at("emb/" + f.name), batch.single[f.payload]));
                break;
            case FieldKind::multi_categorical:
                out.push_back(embedding_bag(m.params.at("emb/" + f.name),
                                            batch.multi_flat[f.payload],
                                            batch.multi_offsets[f.payload]));
                break;
            case FieldKind::dense:
                out.push_back(dense_adaptor(m, f, batch.dense[f.payload]));
                break;
        }
    }
    return out;
}

inline Tensor first_order_logit(CtrModel& m, const Batch& batch) {
    Tensor logit;
    for (const auto& f : m.schema.fields) {
        Tensor contrib;
        switch (f.kind) {
            case FieldKind::categorical:
            case FieldKind::numeric:
            case FieldKind::token:
                contrib = gather_rows(m.params.at("first/" + f.name), batch.single[f.payload]);
                break;
            case FieldKind::multi_categorical:
                contrib = embedding_bag(m.params.at("first/" + f.name), batch.multi_flat[f.payload],
                                        batch.multi_offsets[f.payload]);
                break;
            case FieldKind::dense:
                contrib = matmul(batch.dense[f.payload], m.params.at("first/" + f.name + "/w"));
                break;
        }
        logit = logit.defined() ? add(logit, contrib) : contrib;
    }
    return add(logit, m.params.at("w0"));
}

// FM pairwise term via the 0.5 * (|sum v|^2 - sum |v|^2) identity, (B, 1).
inline Tensor fm_pairwise_logit(const std::vector<Tensor>& es) {
    Tensor sum_v = es[0];
    Tensor sq_sum = mul(es[0], es[0]);
    for (size_t i = 1; i < es.size(); ++i) {
        sum_v = add(sum_v, es[i]);
        sq_sum = add(sq_sum, mul(es[i], es[i]));
    }
    Tensor diff = sub(mul(sum_v, sum_v), sq_sum);
    return scale(sum(diff, 1, /*keepdims=*/true), 0.5);
}

inline Tensor mlp_forward(CtrModel& m, const std::string& prefix, Tensor x, size_t n_layers,
                          bool relu_last) {
    for (size_t li = 0; li < n_layers; ++li) {
        x = add(matmul(x, m.params.at(prefix + "/w" + std::to_string(li))),
                m.params.at(prefix + "/b" + std::to_string(li)));
        if (li + 1 < n_layers || relu_last) x = relu(x);
    }
    return x;
}

inline Tensor ffm_logit(CtrModel& m, const Batch& batch) {
    const auto& fields = m.schema.fields;
    const size_t nf = fields.size();
    // Field-aware vectors: emb[i][j] is field i's embedding against field j.
    // Dense fields contribute one adaptor vector used against every field.
    std::vector<Tensor> dense_vec(nf);
    auto vec_for = [&](size_t i, size_t j) -> Tensor {
        const auto& f = fields[i];
        if (f.kind == FieldKind::dense) {
            if (!dense_vec[i].defined()) dense_vec[i] = dense_adaptor(m, f, batch.dense[f.payload]);
            return dense_vec[i];
        }
        const std::string name = "ffm/" + f.name + "/" + fields[j].name;
        if (f.kind == FieldKind::multi_categorical)
            return embedding_bag(m.params.at(name), batch.multi_flat[f.payload],
                                 batch.multi_offsets[f.payload]);
        return gather_rows(m.params.at(name), batch.single[f.payload]);
    };
    Tensor logit;
    for (size_t i = 0; i < nf; ++i)
        for (size_t j = i + 1; j < nf; ++j) {
            Tensor t = sum(mul(vec_for(i, j), vec_for(j, i)), 1, true);
            logit = logit.defined() ? add(logit, t) : t;
        }
    return logit;
}

inline std::vector<Tensor> afm_pair_terms(const std::vector<Tensor>& es) {
    std::vector<Tensor> pair_terms;  // (B, d) each
    for (size_t i = 0; i < es.size(); ++i)
        for (size_t j = i + 1; j < es.size(); ++j) pair_terms.push_back(mul(es[i], es[j]));
    return pair_terms;
}

inline Tensor afm_attention(CtrModel& m, const std::vector<Tensor>& pair_terms) {
    std::vector<Tensor> scores;  // (B, 1) each
    for (const auto& t : pair_terms) {
        Tensor hidden = relu(add(matmul(t, m.params.at("afm/W")), m.params.at("afm/b")));
        scores.push_back(matmul(hidden, m.params.at("afm/h")));
    }
    return softmax_last(concat_last(scores));  // (B, P)
}

inline Tensor afm_logit(CtrModel& m, const std::vector<Tensor>& es) {
    std::vector<Tensor> pair_terms = afm_pair_terms(es);
    Tensor attn = afm_attention(m, pair_terms);
    Tensor mixed;
    for (size_t p = 0; p < pair_terms.size(); ++p) {
        Tensor w = slice_last(attn, static_cast<int64_t>(p), static_cast<int64_t>(p) + 1);
        Tensor term = mul(pair_terms[p], w);  // row-scalar broadcast
        mixed = mixed.defined() ? add(mixed, term) : term;
    }
    return matmul(mixed, m.params.at("afm/p"));
}

inline Tensor dcnv2_logit(CtrModel& m, const std::vector<Tensor>& es) {
    Tensor x0 = concat_last(es);
    Tensor x = x0;
    for (int l = 0; l < m.hyper.cross_depth; ++l) {
        Tensor wx = add(matmul(x, m.params.at("cross/w" + std::to_string(l))),
                        m.params.at("cross/b" + std::to_string(l)));
        x = add(mul(x0, wx), x);
    }
    Tensor deep = mlp_forward(m, "deep", x0, m.hyper.mlp.size(), /*relu_last=*/true);
    Tensor both = concat_last({x, deep});
    return add(matmul(both, m.params.at("final/w")), m.params.at("final/b"));
}

}  // namespace detail

// Logits (B, 1) for a batch; the training loss applies BCE-with-logits on top.
inline Tensor ctr_logits(CtrModel& m, const Batch& batch) {
    TASTE_CHECK(batch.schema_id == m.schema_id, Errc::schema_error,
                "batch was encoded with a different schema");
    switch (m.kind) {
        case CtrKind::lr:
            return detail::first_order_logit(m, batch);
        case CtrKind::fm: {
            auto es = detail::field_embeddings(m, batch);
            return add(detail::first_order_logit(m, batch), detail::fm_pairwise_logit(es));
        }
        case CtrKind::ffm:
            return add(detail::first_order_logit(m, batch), detail::ffm_logit(m, batch));
        case CtrKind::afm: {
            auto es = detail::field_embeddings(m, batch);
            return add(detail::first_order_logit(m, batch), detail::afm_logit(m, es));
        }
        case CtrKind::wide_deep: {
            auto es = detail::field_embeddings(m, batch);
            Tensor deep = detail::mlp_forward(m, "mlp", concat_last(es), m.hyper.mlp.size() + 1,
                                              /*relu_last=*/false);
            return add(detail::first_order_logit(m, batch), deep);
        }
        case CtrKind::deepfm: {
            auto es = detail::field_embeddings(m, batch);
            Tensor fm = add(detail::first_order_logit(m, batch), detail::fm_pairwise_logit(es));
            Tensor deep = detail::mlp_forward(m, "mlp", concat_last(es), m.hyper.mlp.size() + 1,
                                              /*relu_last=*/false);
            return add(fm, deep);
        }
        case CtrKind::dcnv2: {
            auto es = detail::field_embeddings(m, batch);
            return detail::dcnv2_logit(m, es);
        }
    }
    fail(Errc::config_error, "unreachable model kind");
}

// Training loss: mean BCE-with-logits plus the L2 penalty on embedding tables.
inline Tensor ctr_loss(CtrModel& m, const Batch& batch) {
    Tensor loss = mean_all(bce_with_logits(ctr_logits(m, batch), batch.labels));
    if (m.hyper.l2 > 0.0) {
        Tensor penalty;
        for (const auto& name : m.l2_params) {
            Tensor& t = m.params.at(name);
            Tensor sq = sum_all(mul(t, t));
            penalty = penalty.defined() ? add(penalty, sq) : sq;
        }
        if (penalty.defined()) loss = add(loss, scale(penalty, m.hyper.l2));
    }
    return loss;
}

// Probabilities strictly inside (0,1).
inline std::vector<double> ctr_forward(CtrModel& m, const Batch& batch) {
    Tensor logits = ctr_logits(m, batch);
    std::vector<double> out(logits.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        TASTE_CHECK(std::isfinite(logits.values()[i]), Errc::non_finite_value,
                    "non-finite logit in forward pass");
        out[i] = std::clamp(sigmoid_scalar(logits.values()[i]), 1e-15, 1.0 - 1e-15);
    }
    return out;
}

// Convenience: batched prediction over encoded instances.
inline std::vector<double> ctr_predict(CtrModel& m, const std::vector<Instance>& rows,
                                       int64_t batch_size = 4096) {
    std::vector<double> probs;
    probs.reserve(rows.size());
    std::vector<size_t> idx;
    for (size_t start = 0; start < rows.size(); start += static_cast<size_t>(batch_size)) {
        idx.clear();
        for (size_t i = start; i < std::min(rows.size(), start + static_cast<size_t>(batch_size)); ++i)
            idx.push_back(i);
        Batch b = make_batch(m.schema, rows, idx);
        auto p = ctr_forward(m, b);
        probs.insert(probs.end(), p.begin(), p.end());
    }
    return probs;
}

// ---------------------------------------------------------------------------
// Recall models

enum class RecallKind { bpr, vbpr };

inline const char* to_string(RecallKind k) { return k == RecallKind::bpr ? "bpr" : "vbpr"; }

struct RecallModel {
    RecallKind kind = RecallKind::bpr;
    int64_t n_users = 0, n_items = 0;
    int64_t d = 16;       // ID embedding size
    int64_t d_visual = 16;  // modal factor size (vbpr)
    int64_t feat_dim = 0;   // modal feature dimension
    ParamStore params;
    Tensor features;  // (n_items, feat_dim) constant, vbpr only
    double l2 = 1e-6;
};

// VBPR consumes concat(mean-pooled audio, text) per item.
inline Tensor recall_feature_matrix(const LayeredEmbeddings& emb) {
    const int64_t dim = emb.H + emb.d_text;
    std::vector<double> out(static_cast<size_t>(emb.n * dim), 0.0);
    for (int64_t i = 0; i < emb.n; ++i) {
        if (!emb.has(i)) continue;
        double* dst = out.data() + i * dim;
        for (int64_t l = 0; l < emb.L; ++l) {
            const float* src = emb.audio_at(i) + l * emb.H;
            for (int64_t h = 0; h < emb.H; ++h) dst[h] += src[h];
        }
        for (int64_t h = 0; h < emb.H; ++h) dst[h] /= static_cast<double>(emb.L);
        const float* txt = emb.text_at(i);
        for (int64_t t = 0; t < emb.d_text; ++t) dst[emb.H + t] = txt[t];
    }
    return Tensor({emb.n, dim}, std::move(out));
}

inline RecallModel make_recall_model(RecallKind kind, int64_t n_users, int64_t n_items, int64_t d,
                                     uint64_t seed, const LayeredEmbeddings* emb = nullptr,
                                     double l2 = 1e-6) {
    RecallModel m;
    m.kind = kind;
    m.n_users = n_users;
    m.n_items = n_items;
    m.d = d;
    m.d_visual = d;
    m.l2 = l2;
    Rng rng(mix_seed(seed, 0x726563616cull));
    m.params.add("user_emb", detail::init_normal({n_users, d}, 0.01, rng));
    m.params.add("item_emb", detail::init_normal({n_items, d}, 0.01, rng));
    m.params.add("item_bias", Tensor::zeros({n_items, 1}, true));
    if (kind == RecallKind::vbpr) {
        TASTE_CHECK(emb != nullptr, Errc::missing_modality, "vbpr requires embeddings");
        m.features = recall_feature_matrix(*emb);
        m.feat_dim = m.features.shape()[1];
        m.params.add("user_vis", detail::init_normal({n_users, m.d_visual}, 0.01, rng));
        m.params.add("proj", detail::init_normal({m.feat_dim, m.d_visual}, 0.01, rng));
        m.params.add("vis_bias", Tensor::zeros({m.feat_dim, 1}, true));
    }
    return m;
}

// Pairwise-ranking loss term x_u,i - x_u,j for sampled triples, (B, 1).
inline Tensor recall_pairwise_diff(RecallModel& m, const std::vector<int64_t>& users,
                                   const std::vector<int64_t>& pos_items,
                                   const std::vector<int64_t>& neg_items) {
    Tensor gu = gather_rows(m.params.at("user_emb"), users);
    Tensor gi = gather_rows(m.params.at("item_emb"), pos_items);
    Tensor gj = gather_rows(m.params.at("item_emb"), neg_items);
    Tensor bi = gather_rows(m.params.at("item_bias"), pos_items);
    Tensor bj = gather_rows(m.params.at("item_bias"), neg_items);
    Tensor diff = add(sum(mul(gu, sub(gi, gj)), 1, true), sub(bi, bj));
    if (m.kind == RecallKind::vbpr) {
        Tensor fu = gather_rows(m.params.at("user_vis"), users);
        Tensor fi = gather_rows(m.features, pos_items);
        Tensor fj = gather_rows(m.features, neg_items);
        Tensor fdiff = sub(fi, fj);
        Tensor proj = matmul(fdiff, m.params.at("proj"));       // (B, dv)
        Tensor vis = sum(mul(fu, proj), 1, true);               // theta_u . E(f_i - f_j)
        Tensor vbias = matmul(fdiff, m.params.at("vis_bias"));  // beta' . (f_i - f_j)
        diff = add(diff, add(vis, vbias));
    }
    return diff;
}

inline Tensor recall_loss(RecallModel& m, const std::vector<int64_t>& users,
                          const std::vector<int64_t>& pos_items,
                          const std::vector<int64_t>& neg_items) {
    Tensor diff = recall_pairwise_diff(m, users, pos_items, neg_items);
    // -ln sigma(diff) == BCE-with-logits against target 1.
    Tensor ones = Tensor::full({diff.shape()[0], 1}, 1.0);
    Tensor loss = mean_all(bce_with_logits(diff, ones));
    if (m.l2 > 0.0) {
        Tensor penalty = sum_all(mul(m.params.at("user_emb"), m.params.at("user_emb")));
        penalty = add(penalty, sum_all(mul(m.params.at("item_emb"), m.params.at("item_emb"))));
        if (m.kind == RecallKind::vbpr) {
            penalty = add(penalty, sum_all(mul(m.params.at("user_vis"), m.params.at("user_vis"))));
            penalty = add(penalty, sum_all(mul(m.params.at("proj"), m.params.at("proj"))));
        }
        loss = add(loss, scale(penalty, m.l2));
    }
    return loss;
}

// Frozen-model scorer; caches table pointers and precomputes the item-side
// modal projections.
struct RecallScorer {
    const RecallModel* model;
    const double* user_emb;
    const double* item_emb;
    const double* item_bias;
    const double* user_vis = nullptr;
    int64_t d, d_visual;
    bool is_vbpr;
    std::vector<double> item_visual;    // n_items * d_visual (vbpr)
    std::vector<double> item_vis_bias;  // n_items (vbpr)

    explicit RecallScorer(const RecallModel& m)
        : model(&m),
          user_emb(m.params.at("user_emb").values().data()),
          item_emb(m.params.at("item_emb").values().data()),
          item_bias(m.params.at("item_bias").values().data()),
          d(m.d),
          d_visual(m.d_visual),
          is_vbpr(m.kind == RecallKind::vbpr) {
        if (!is_vbpr) return;
        user_vis = m.params.at("user_vis").values().data();
        const auto& f = m.features.values();
        const auto& e = m.params.at("proj").values();
        const auto& bv = m.params.at("vis_bias").values();
        const int64_t n = m.n_items, fd = m.feat_dim, dv = m.d_visual;
        item_visual.assign(static_cast<size_t>(n * dv), 0.0);
        item_vis_bias.assign(static_cast<size_t>(n), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            const double* fi = f.data() + i * fd;
            double* vi = item_visual.data() + i * dv;
            double acc = 0.0;
            for (int64_t t = 0; t < fd; ++t) {
                const double ft = fi[t];
                if (ft == 0.0) continue;
                const double* erow = e.data() + t * dv;
                for (int64_t v = 0; v < dv; ++v) vi[v] += ft * erow[v];
                acc += ft * bv[t];
            }
            item_vis_bias[static_cast<size_t>(i)] = acc;
        }
    }

    double score(int64_t user, int64_t item) const {
        const double* gu = user_emb + user * d;
        const double* gi = item_emb + item * d;
        double s = item_bias[item];
        for (int64_t t = 0; t < d; ++t) s += gu[t] * gi[t];
        if (is_vbpr) {
            const double* tu = user_vis + user * d_visual;
            const double* vi = item_visual.data() + item * d_visual;
            for (int64_t t = 0; t < d_visual; ++t) s += tu[t] * vi[t];
            s += item_vis_bias[static_cast<size_t>(item)];
        }
        return s;
    }
};

inline double recall_score(const RecallModel& m, int64_t user, int64_t item) {
    return RecallScorer(m).score(user, item);
}

struct RankedList {
    std::vector<int64_t> items;
    bool short_list = false;  // fewer than K candidates were available
};

// Top-K by score over all non-excluded items; ties break by ascending index.
inline RankedList rank_items(const RecallScorer& scorer, int64_t user,
                             const std::set<int64_t>& exclude, size_t k) {
    TASTE_CHECK(k >= 1, Errc::degenerate_input, "K must be >= 1");
    const int64_t n_items = scorer.model->n_items;
    std::vector<std::pair<double, int64_t>> scored;
    scored.reserve(static_cast<size_t>(n_items));
    for (int64_t i = 0; i < n_items; ++i) {
        if (exclude.count(i)) continue;
        scored.emplace_back(scorer.score(user, i), i);
    }
    const size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(take), scored.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
    RankedList out;
    out.short_list = scored.size() < k;
    for (size_t i = 0; i < take; ++i) out.items.push_back(scored[i].second);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: self-describing binary (kind, schema hash, shapes, f32
// payload). Values round-trip through f32.

constexpr char kCkptMagic[8] = {'T', 'A', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

inline void save_params(ByteWriter& w, const ParamStore& params) {
    w.u32(static_cast<uint32_t>(params.tensors.size()));
    for (size_t i = 0; i < params.tensors.size(); ++i) {
        w.str(params.names[i]);
        const Tensor& t = params.tensors[i];
        w.u32(static_cast<uint32_t>(t.shape().size()));
        for (int64_t dim : t.shape()) w.u32(static_cast<uint32_t>(dim));
        for (double v : t.values()) w.f32(static_cast<float>(v));
    }
}

inline void load_params(ByteReader& r, ParamStore& params) {
    const uint32_t n = r.u32();
    TASTE_CHECK(n == params.tensors.size(), Errc::truncated_file, "parameter count mismatch");
    for (uint32_t i = 0; i < n; ++i) {
        const std::string name = r.str();
        TASTE_CHECK(name == params.names[i], Errc::schema_error,
                    "parameter order mismatch at " + name);
        Tensor& t = params.tensors[i];
        const uint32_t rank = r.u32();
        Shape shape;
        for (uint32_t s = 0; s < rank; ++s) shape.push_back(r.u32());
        TASTE_CHECK(shape == t.shape(), Errc::schema_error, "parameter shape mismatch at " + name);
        for (double& v : t.values()) v = r.f32();
    }
}

inline void save_ctr_checkpoint(const std::string& path, const CtrModel& m) {
    ByteWriter w;
    w.raw(kCkptMagic, 8);
    w.u32(kCkptVersion);
    w.str("ctr");
    w.str(to_string(m.kind));
    w.str(schema_to_json(m.schema).dump());
    w.u64(schema_hash(m.schema));
    nlohmann::json hj;
    hj["d"] = m.hyper.d;
    hj["mlp"] = m.hyper.mlp;
    hj["cross_depth"] = m.hyper.cross_depth;
    hj["attention_dim"] = m.hyper.attention_dim;
    hj["adaptor_hidden"] = m.hyper.adaptor_hidden;
    hj["l2"] = m.hyper.l2;
    w.str(hj.dump());
    save_params(w, m.params);
    write_file(path, w.bytes);
}

inline CtrModel load_ctr_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes);
    char magic[8];
    r.raw(magic, 8);
    TASTE_CHECK(std::memcmp(magic, kCkptMagic, 8) == 0, Errc::bad_magic, "not a checkpoint");
    TASTE_CHECK(r.u32() == kCkptVersion, Errc::version_mismatch, "checkpoint version");
    TASTE_CHECK(r.str() == "ctr", Errc::schema_error, "not a CTR checkpoint");
    const std::string kind = r.str();
    FeatureSchema schema = schema_from_json(nlohmann::json::parse(r.str()));
    const uint64_t hash = r.u64();
    TASTE_CHECK(hash == schema_hash(schema), Errc::schema_error, "schema hash mismatch");
    nlohmann::json hj = nlohmann::json::parse(r.str());
    CtrHyper hyper;
    hyper.d = hj["d"].get<int64_t>();
    hyper.mlp = hj["mlp"].get<std::vector<int64_t>>();
    hyper.cross_depth = hj["cross_depth"].get<int>();
    hyper.attention_dim = hj["attention_dim"].get<int64_t>();
    hyper.adaptor_hidden = hj["adaptor_hidden"].get<std::vector<int64_t>>();
    hyper.l2 = hj["l2"].get<double>();
    CtrModel m = make_ctr_model(ctr_kind_from(kind), schema, hyper, /*seed=*/0);
    load_params(r, m.params);
    TASTE_CHECK(r.done(), Errc::truncated_file, "trailing bytes in checkpoint");
    return m;
}

inline void save_recall_checkpoint(const std::string& path, const RecallModel& m) {
    ByteWriter w;
    w.raw(kCkptMagic, 8);
    w.u32(kCkptVersion);
    w.str("recall");
    w.str(to_string(m.kind));
    w.u32(static_cast<uint32_t>(m.n_users));
    w.u32(static_cast<uint32_t>(m.n_items));
    w.u32(static_cast<uint32_t>(m.d));
    w.u32(static_cast<uint32_t>(m.d_visual));
    w.u32(static_cast<uint32_t>(m.feat_dim));
    w.f64(m.l2);
    if (m.kind == RecallKind::vbpr)
        for (double v : m.features.values()) w.f32(static_cast<float>(v));
    save_params(w, m.params);
    write_file(path, w.bytes);
}

inline RecallModel load_recall_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes);
    char magic[8];
    r.raw(magic, 8);
    TASTE_CHECK(std::memcmp(magic, kCkptMagic, 8) == 0, Errc::bad_magic, "not a checkpoint");
    TASTE_CHECK(r.u32() == kCkptVersion, Errc::version_mismatch, "checkpoint version");
    TASTE_CHECK(r.str() == "recall", Errc::schema_error, "not a recall checkpoint");
    const std::string kind_str = r.str();
    const RecallKind kind = kind_str == "bpr" ? RecallKind::bpr : RecallKind::vbpr;
    const int64_t n_users = r.u32(), n_items = r.u32(), d = r.u32();
    const int64_t d_visual = r.u32(), feat_dim = r.u32();
    const double l2 = r.f64();
    RecallModel m;
    m.kind = kind;
    m.n_users = n_users;
    m.n_items = n_items;
    m.d = d;
    m.d_visual = d_visual;
    m.feat_dim = feat_dim;
    m.l2 = l2;
    Rng rng(0);
    m.params.add("user_emb", Tensor::zeros({n_users, d}, true));
    m.params.add("item_emb", Tensor::zeros({n_items, d}, true));
    m.params.add("item_bias", Tensor::zeros({n_items, 1}, true));
    if (kind == RecallKind::vbpr) {
        std::vector<double> feat(static_cast<size_t>(n_items * feat_dim));
        for (double& v : feat) v = r.f32();
        m.features = Tensor({n_items, feat_dim}, std::move(feat));
        m.params.add("user_vis", Tensor::zeros({n_users, d_visual}, true));
        m.params.add("proj", Tensor::zeros({feat_dim, d_visual}, true));
        m.params.add("vis_bias", Tensor::zeros({feat_dim, 1}, true));
    }
    load_params(r, m.params);
    TASTE_CHECK(r.done(), Errc::truncated_file, "trailing bytes in checkpoint");
    return m;
}

}  // namespace taste
