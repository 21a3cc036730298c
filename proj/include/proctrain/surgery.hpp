#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "proctrain/ckpt_store.hpp"
#include "proctrain/model.hpp"
#include "proctrain/rng.hpp"
#include "proctrain/serde.hpp"

namespace proctrain {

// The weight partition: E = embedding/unembedding side (token and positional
// tables, projections in binary mode, final layer norm), A = per-layer
// attention sub-blocks with their preceding layer norm, F = per-layer MLP
// sub-blocks with theirs.
enum class Group { E, A, F };

inline std::string group_name(Group g) {
    switch (g) {
        case Group::E: return "E";
        case Group::A: return "A";
        default: return "F";
    }
}

inline Group group_from(const std::string& s) {
    if (s == "E") return Group::E;
    if (s == "A") return Group::A;
    if (s == "F") return Group::F;
    throw ConfigError("unknown component group '" + s + "'");
}

// Pure function of the canonical tensor name.
inline Group group_of(const std::string& name) {
    if (name.rfind("embed.", 0) == 0 || name.rfind("unembed.", 0) == 0 ||
        name.rfind("final_ln.", 0) == 0 || name.rfind("proj.", 0) == 0)
        return Group::E;
    if (name.rfind("layer.", 0) == 0) {
        const size_t second = name.find('.', 6);
        if (second != std::string::npos) {
            const std::string sub = name.substr(second + 1);
            if (sub.rfind("ln1.", 0) == 0 || sub.rfind("attn.", 0) == 0) return Group::A;
            if (sub.rfind("ln2.", 0) == 0 || sub.rfind("mlp.", 0) == 0) return Group::F;
        }
    }
    throw IndexError("'" + name + "' is not a canonical tensor name");
}

// ---------------------------------------------------------------------------
// Perturbations.
// ---------------------------------------------------------------------------
enum class PerturbKind { gaussian_noise, per_tensor_shuffle };

struct PerturbationSpec {
    PerturbKind kind = PerturbKind::gaussian_noise;
    double sigma = 0.0;  // noise only
    uint64_t seed = 0;
    std::set<Group> scope;
};

// w <- w + eps, eps ~ N(0, sigma^2) iid, for tensors whose group is in scope.
// sigma = 0 leaves the checkpoint bit-identical.
inline Checkpoint perturb_noise(const Checkpoint& ckpt, double sigma, uint64_t seed,
                                const std::set<Group>& scope) {
    if (sigma < 0.0) throw ConfigError("perturb_noise: sigma must be >= 0");
    Checkpoint out = ckpt.clone();
    if (sigma == 0.0) return out;
    for (auto& [name, t] : out.tensors) {
        if (!scope.count(group_of(name))) continue;
        Rng rng(hash_str(seed, name));
        for (auto& v : t.data()) v += rng.normal_f(0.0f, float(sigma));
    }
    return out;
}

// Applies an independent uniform permutation to each in-scope tensor's
// flattened elements. Preserves each tensor's exact value multiset.
inline Checkpoint perturb_shuffle(const Checkpoint& ckpt, uint64_t seed,
                                  const std::set<Group>& scope) {
    Checkpoint out = ckpt.clone();
    for (auto& [name, t] : out.tensors) {
        if (!scope.count(group_of(name))) continue;
        Rng rng(hash_str(seed, name));
        auto data = t.data();
        for (int64_t i = t.numel() - 1; i > 0; --i) {
            const int64_t j = rng.uniform_int(i + 1);
            std::swap(data[i], data[j]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding resets and positional transfer.
// ---------------------------------------------------------------------------

// Replaces every token-embedding row with the donor table's column-wise mean,
// and symmetrically every unembedding column (and bias entry) with its mean.
// The positional table is untouched. Token mode only.
inline Checkpoint average_embedding_reset(const Checkpoint& donor) {
    if (donor.config.input_mode != InputMode::token)
        throw TransferError("average_embedding_reset applies to token-mode checkpoints");
    Checkpoint out = donor.clone();
    {
        Tensor& tok = out.at("embed.tok");
        const int64_t v = tok.dim(0), d = tok.dim(1);
        std::vector<double> mean(d, 0.0);
        for (int64_t r = 0; r < v; ++r)
            for (int64_t j = 0; j < d; ++j) mean[j] += tok.data()[r * d + j];
        for (int64_t j = 0; j < d; ++j) mean[j] /= double(v);
        for (int64_t r = 0; r < v; ++r)
            for (int64_t j = 0; j < d; ++j) tok.data()[r * d + j] = float(mean[j]);
    }
    {
        Tensor& w = out.at("unembed.w");
        const int64_t d = w.dim(0), v = w.dim(1);
        std::vector<double> mean(d, 0.0);
        for (int64_t j = 0; j < d; ++j)
            for (int64_t c = 0; c < v; ++c) mean[j] += w.data()[j * v + c];
        for (int64_t j = 0; j < d; ++j) mean[j] /= double(v);
        for (int64_t j = 0; j < d; ++j)
            for (int64_t c = 0; c < v; ++c) w.data()[j * v + c] = float(mean[j]);
        Tensor& b = out.at("unembed.b");
        double bm = 0.0;
        for (float x : b.data()) bm += x;
        bm /= double(b.numel());
        for (auto& x : b.data()) x = float(bm);
    }
    return out;
}

// Mean embedding/unembedding vectors of a donor, defined for both input
// modes. For a binary-vector donor the mean input embedding is taken under
// Bernoulli(0.5) cells: proj.in.b + 0.5 * column sums of proj.in.w.
struct EmbedMeans {
    std::vector<float> embed_row;    // [d]
    std::vector<float> unembed_col;  // [d]
    float unembed_bias = 0.0f;
};

inline EmbedMeans embedding_means(const Checkpoint& donor) {
    const int64_t d = donor.config.d_model;
    EmbedMeans m;
    m.embed_row.assign(d, 0.0f);
    m.unembed_col.assign(d, 0.0f);
    if (donor.config.input_mode == InputMode::token) {
        const Tensor& tok = donor.at("embed.tok");
        const int64_t v = tok.dim(0);
        std::vector<double> acc(d, 0.0);
        for (int64_t r = 0; r < v; ++r)
            for (int64_t j = 0; j < d; ++j) acc[j] += tok.data()[r * d + j];
        for (int64_t j = 0; j < d; ++j) m.embed_row[j] = float(acc[j] / double(v));
        const Tensor& w = donor.at("unembed.w");
        const int64_t vc = w.dim(1);
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < vc; ++c) s += w.data()[j * vc + c];
            m.unembed_col[j] = float(s / double(vc));
        }
        const Tensor& b = donor.at("unembed.b");
        double bm = 0.0;
        for (float x : b.data()) bm += x;
        m.unembed_bias = float(bm / double(b.numel()));
    } else {
        const Tensor& w = donor.at("proj.in.w");
        const int64_t width = w.dim(0);
        const Tensor& b = donor.at("proj.in.b");
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t r = 0; r < width; ++r) s += w.data()[r * d + j];
            m.embed_row[j] = float(0.5 * s + b.data()[j]);
        }
        const Tensor& ow = donor.at("proj.out.w");
        const int64_t wc = ow.dim(1);
        for (int64_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int64_t c = 0; c < wc; ++c) s += ow.data()[j * wc + c];
            m.unembed_col[j] = float(s / double(wc));
        }
        const Tensor& ob = donor.at("proj.out.b");
        double bm = 0.0;
        for (float x : ob.data()) bm += x;
        m.unembed_bias = float(bm / double(ob.numel()));
    }
    return m;
}

// Copy the first target_context rows when the donor table is long enough,
// otherwise fall back to the supplied fresh table.
inline Tensor transfer_positional(const Tensor& donor_pos, int64_t target_context,
                                  const Tensor& fresh_pos) {
    if (donor_pos.ndim() != 2 || fresh_pos.ndim() != 2 ||
        donor_pos.dim(1) != fresh_pos.dim(1))
        throw TransferError("transfer_positional: embedding width mismatch: " +
                            shape_str(donor_pos.shape()) + " vs " +
                            shape_str(fresh_pos.shape()));
    if (fresh_pos.dim(0) != target_context)
        throw TransferError("transfer_positional: fresh table rows != target context");
    if (donor_pos.dim(0) >= target_context) {
        Tensor out = Tensor::zeros({target_context, donor_pos.dim(1)});
        std::copy_n(donor_pos.data().data(), target_context * donor_pos.dim(1),
                    out.data().data());
        return out;
    }
    return fresh_pos.clone();
}

// ---------------------------------------------------------------------------
// Transfer plans.
// ---------------------------------------------------------------------------
enum class EmbeddingPolicy { copy, average_reset, fresh };
enum class PositionalPolicy { copy_if_context_sufficient, fresh };

// Declarative initialization recipe: which donor (or the fresh stream)
// supplies each component group, how the embedding side is adapted, and an
// optional perturbation applied after assembly.
struct GroupSource {
    bool from_donor = false;
    std::string donor_id;  // key into the donors map

    static GroupSource fresh() { return {}; }
    static GroupSource donor(std::string id) { return {true, std::move(id)}; }
};

struct TransferPlan {
    GroupSource e, a, f;
    EmbeddingPolicy embedding_policy = EmbeddingPolicy::copy;
    PositionalPolicy positional_policy = PositionalPolicy::copy_if_context_sufficient;
    uint64_t fresh_seed = 0;
    std::optional<PerturbationSpec> perturbation;

    void validate() const {
        if (embedding_policy == EmbeddingPolicy::average_reset && !e.from_donor)
            throw ConfigError("transfer plan: average_reset requires an E donor");
    }

    std::set<Group> transferred_groups() const {
        std::set<Group> out;
        if (e.from_donor) out.insert(Group::E);
        if (a.from_donor) out.insert(Group::A);
        if (f.from_donor) out.insert(Group::F);
        return out;
    }
};

// ---- plan (de)serialization ------------------------------------------------

inline std::string embedding_policy_name(EmbeddingPolicy p) {
    switch (p) {
        case EmbeddingPolicy::copy: return "copy";
        case EmbeddingPolicy::average_reset: return "average_reset";
        default: return "fresh";
    }
}

inline EmbeddingPolicy embedding_policy_from(const std::string& s) {
    if (s == "copy") return EmbeddingPolicy::copy;
    if (s == "average_reset") return EmbeddingPolicy::average_reset;
    if (s == "fresh") return EmbeddingPolicy::fresh;
    throw ConfigError("unknown embedding_policy '" + s + "'");
}

inline json plan_to_json(const TransferPlan& plan) {
    auto src = [](const GroupSource& s) {
        return s.from_donor ? "donor:" + s.donor_id : std::string("fresh");
    };
    json j{{"groups", {{"E", src(plan.e)}, {"A", src(plan.a)}, {"F", src(plan.f)}}},
           {"embedding_policy", embedding_policy_name(plan.embedding_policy)},
           {"positional_policy", plan.positional_policy == PositionalPolicy::fresh
                                     ? "fresh"
                                     : "copy_if_context_sufficient"},
           {"fresh_seed", plan.fresh_seed}};
    if (plan.perturbation) {
        const auto& p = *plan.perturbation;
        json scope = json::array();
        for (Group g : p.scope) scope.push_back(group_name(g));
        j["perturbation"] = {{"kind", p.kind == PerturbKind::gaussian_noise
                                          ? "gaussian_noise"
                                          : "per_tensor_shuffle"},
                             {"sigma", p.sigma},
                             {"seed", p.seed},
                             {"scope", scope}};
    }
    return j;
}

inline TransferPlan plan_from_json(const json& j) {
    reject_unknown_keys(
        j, {"groups", "embedding_policy", "positional_policy", "fresh_seed", "perturbation"},
        "transfer plan");
    TransferPlan plan;
    const json& groups = j.at("groups");
    reject_unknown_keys(groups, {"E", "A", "F"}, "transfer plan groups");
    auto parse_src = [](const std::string& s) {
        if (s == "fresh") return GroupSource::fresh();
        if (s.rfind("donor:", 0) == 0) return GroupSource::donor(s.substr(6));
        throw ConfigError("group source must be 'fresh' or 'donor:<id>', got '" + s + "'");
    };
    plan.e = parse_src(groups.at("E").get<std::string>());
    plan.a = parse_src(groups.at("A").get<std::string>());
    plan.f = parse_src(groups.at("F").get<std::string>());
    if (j.count("embedding_policy"))
        plan.embedding_policy = embedding_policy_from(j.at("embedding_policy"));
    if (j.count("positional_policy")) {
        const std::string s = j.at("positional_policy");
        if (s == "fresh")
            plan.positional_policy = PositionalPolicy::fresh;
        else if (s == "copy_if_context_sufficient")
            plan.positional_policy = PositionalPolicy::copy_if_context_sufficient;
        else
            throw ConfigError("unknown positional_policy '" + s + "'");
    }
    if (j.count("fresh_seed")) plan.fresh_seed = j.at("fresh_seed").get<uint64_t>();
    if (j.count("perturbation") && !j.at("perturbation").is_null()) {
        const json& p = j.at("perturbation");
        reject_unknown_keys(p, {"kind", "sigma", "seed", "scope"}, "perturbation");
        PerturbationSpec spec;
        const std::string kind = p.at("kind");
        if (kind == "gaussian_noise")
            spec.kind = PerturbKind::gaussian_noise;
        else if (kind == "per_tensor_shuffle")
            spec.kind = PerturbKind::per_tensor_shuffle;
        else
            throw ConfigError("unknown perturbation kind '" + kind + "'");
        spec.sigma = p.value("sigma", 0.0);
        spec.seed = p.value("seed", uint64_t(0));
        for (const auto& g : p.at("scope")) spec.scope.insert(group_from(g.get<std::string>()));
        plan.perturbation = spec;
    }
    plan.validate();
    return plan;
}

inline std::string plan_digest(const TransferPlan& plan) {
    return sha256_hex(plan_to_json(plan).dump());
}

// ---------------------------------------------------------------------------
// build_init: assemble an initialization checkpoint from a plan.
// ---------------------------------------------------------------------------
namespace detail {

inline const Checkpoint& resolve_donor(const std::map<std::string, Checkpoint>& donors,
                                       const GroupSource& src, const char* group) {
    auto it = donors.find(src.donor_id);
    if (it == donors.end())
        throw TransferError("missing donor '" + src.donor_id + "' for group " + group);
    return it->second;
}

inline void copy_group(Checkpoint& out, const Checkpoint& donor, Group group) {
    for (auto& [name, t] : out.tensors) {
        if (group_of(name) != group) continue;
        auto it = donor.tensors.find(name);
        if (it == donor.tensors.end())
            throw TransferError("donor lacks tensor '" + name + "'");
        if (it->second.shape() != t.shape())
            throw TransferError("tensor '" + name + "' shape mismatch: donor " +
                                shape_str(it->second.shape()) + " vs target " +
                                shape_str(t.shape()));
        t = it->second.clone();
    }
}

}  // namespace detail

// Assembles per-group: fresh groups come from init_random(target, fresh_seed)
// (so they bit-match that stream), donor groups are copied, the embedding
// side honors the embedding/positional policies, and any perturbation is
// applied last, restricted to its scope.
inline Checkpoint build_init(const TransferPlan& plan,
                             const std::map<std::string, Checkpoint>& donors,
                             const ModelConfig& target_config) {
    plan.validate();
    target_config.validate();
    Checkpoint out = init_random(target_config, plan.fresh_seed);

    if (plan.a.from_donor)
        detail::copy_group(out, detail::resolve_donor(donors, plan.a, "A"), Group::A);
    if (plan.f.from_donor)
        detail::copy_group(out, detail::resolve_donor(donors, plan.f, "F"), Group::F);

    std::map<std::string, std::string> donor_digests;
    if (plan.a.from_donor)
        donor_digests[plan.a.donor_id] = digest(detail::resolve_donor(donors, plan.a, "A"));
    if (plan.f.from_donor)
        donor_digests[plan.f.donor_id] = digest(detail::resolve_donor(donors, plan.f, "F"));

    if (plan.e.from_donor) {
        const Checkpoint& donor = detail::resolve_donor(donors, plan.e, "E");
        donor_digests[plan.e.donor_id] = digest(donor);
        if (donor.config.d_model != target_config.d_model)
            throw TransferError("E transfer: donor d_model " +
                                std::to_string(donor.config.d_model) + " vs target " +
                                std::to_string(target_config.d_model));
        // final layer norm always travels with E
        out.at("final_ln.g") = donor.at("final_ln.g").clone();
        out.at("final_ln.b") = donor.at("final_ln.b").clone();

        switch (plan.embedding_policy) {
            case EmbeddingPolicy::fresh:
                break;
            case EmbeddingPolicy::copy: {
                if (donor.config.input_mode != target_config.input_mode)
                    throw TransferError(
                        "E copy across input modes is undefined; use average_reset or fresh");
                if (target_config.input_mode == InputMode::token) {
                    // copy the shared id range; rows/cols beyond the donor
                    // vocabulary stay fresh
                    const int64_t d = target_config.d_model;
                    const int64_t shared =
                        std::min(donor.config.vocab_size, target_config.vocab_size);
                    Tensor& tok = out.at("embed.tok");
                    std::copy_n(donor.at("embed.tok").data().data(), shared * d,
                                tok.data().data());
                    Tensor& w = out.at("unembed.w");
                    const Tensor& dw = donor.at("unembed.w");
                    for (int64_t j = 0; j < d; ++j)
                        for (int64_t c = 0; c < shared; ++c)
                            w.data()[j * target_config.vocab_size + c] =
                                dw.data()[j * donor.config.vocab_size + c];
                    Tensor& b = out.at("unembed.b");
                    std::copy_n(donor.at("unembed.b").data().data(), shared, b.data().data());
                } else {
                    if (donor.config.binary_width != target_config.binary_width)
                        throw TransferError("E copy: binary_width mismatch");
                    for (const char* n : {"proj.in.w", "proj.in.b", "proj.out.w", "proj.out.b"})
                        out.at(n) = donor.at(n).clone();
                }
                break;
            }
            case EmbeddingPolicy::average_reset: {
                if (target_config.input_mode != InputMode::token)
                    throw TransferError("average_reset into binary_vector mode is unsupported");
                EmbedMeans m = embedding_means(donor);
                Tensor& tok = out.at("embed.tok");
                const int64_t d = target_config.d_model;
                for (int64_t r = 0; r < target_config.vocab_size; ++r)
                    std::copy(m.embed_row.begin(), m.embed_row.end(),
                              tok.data().data() + r * d);
                Tensor& w = out.at("unembed.w");
                for (int64_t j = 0; j < d; ++j)
                    for (int64_t c = 0; c < target_config.vocab_size; ++c)
                        w.data()[j * target_config.vocab_size + c] = m.unembed_col[j];
                Tensor& b = out.at("unembed.b");
                std::fill(b.data().begin(), b.data().end(), m.unembed_bias);
                break;
            }
        }
        if (plan.positional_policy == PositionalPolicy::copy_if_context_sufficient) {
            out.at("embed.pos") = transfer_positional(
                donor.at("embed.pos"), target_config.context_length, out.at("embed.pos"));
        }
    }

    if (plan.perturbation) {
        const auto& p = *plan.perturbation;
        out = p.kind == PerturbKind::gaussian_noise
                  ? perturb_noise(out, p.sigma, p.seed, p.scope)
                  : perturb_shuffle(out, p.seed, p.scope);
    }

    json prov = {{"kind", "surgery"},
                 {"plan", plan_to_json(plan)},
                 {"plan_digest", plan_digest(plan)},
                 {"donors", donor_digests}};
    out.provenance = prov.dump();
    return out;
}

// (acc_x - acc_rand) / (acc_pre - acc_rand): 1 at the unperturbed pretrained
// accuracy, 0 at the random-init accuracy.
inline double relative_improvement(double acc_x, double acc_rand, double acc_pre) {
    if (acc_pre == acc_rand)
        throw DegenerateScoreError("relative_improvement: pretrained and random accuracies "
                                   "coincide; score undefined");
    return (acc_x - acc_rand) / (acc_pre - acc_rand);
}

}  // namespace proctrain
