#include "coxvae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "binio.hpp"

namespace coxvae {

using nlohmann::json;

void TrainConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw ConfigError("tau must lie in [0,1], got " + std::to_string(tau));
    if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
    if (!(lr_vae > 0.0) || !(lr_cox > 0.0))
        throw ConfigError("learning rates must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (total_steps == 0) throw ConfigError("total_steps must be positive");
    if (latent_dim == 0) throw ConfigError("latent_dim must be positive");
    if (hidden_width == 0) throw ConfigError("hidden_width must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("val_fraction must lie in (0,1)");
}

namespace {

json train_config_to_json(const TrainConfig& c) {
    json j;
    j["tau"] = c.tau;
    j["beta"] = c.beta;
    j["lr_vae"] = c.lr_vae;
    j["lr_cox"] = c.lr_cox;
    j["batch_size"] = c.batch_size;
    j["total_steps"] = c.total_steps;
    j["latent_dim"] = c.latent_dim;
    j["hidden_width"] = c.hidden_width;
    j["eval_every"] = c.eval_every;
    j["full_batch_cox"] = c.full_batch_cox;
    j["val_fraction"] = c.val_fraction;
    j["seed"] = c.seed;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.tau = j.at("tau").get<double>();
    c.beta = j.at("beta").get<double>();
    c.lr_vae = j.at("lr_vae").get<double>();
    c.lr_cox = j.at("lr_cox").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.total_steps = j.at("total_steps").get<std::size_t>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.hidden_width = j.at("hidden_width").get<std::size_t>();
    c.eval_every = j.at("eval_every").get<std::size_t>();
    c.full_batch_cox = j.at("full_batch_cox").get<bool>();
    c.val_fraction = j.at("val_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

std::string sampler_blob(const Rng& rng, const SamplerState& sampler) {
    std::ostringstream os;
    os << rng.serialize() << '\n' << sampler.cursor << '\n' << sampler.order.size();
    for (std::uint32_t v : sampler.order) os << ' ' << v;
    return os.str();
}

void parse_sampler_blob(const std::string& blob, Rng& rng, SamplerState& sampler) {
    std::istringstream is(blob);
    std::string engine;
    if (!std::getline(is, engine))
        throw FormatError("checkpoint: malformed RNG state");
    rng = Rng::deserialize(engine);
    std::size_t count = 0;
    if (!(is >> sampler.cursor >> count))
        throw FormatError("checkpoint: malformed sampler state");
    sampler.order.resize(count);
    for (auto& v : sampler.order)
        if (!(is >> v)) throw FormatError("checkpoint: truncated sampler order");
}

// ---- training state ---------------------------------------------------------

struct TrainState {
    TrainConfig cfg;
    CoxVae model;
    AdamOptimizer adam_vae;
    AdamOptimizer adam_cox;
    Rng rng{0};
    SamplerState sampler;
    std::uint64_t step = 0;

    std::vector<ParamRef> vae_refs;
    std::vector<ParamRef> cox_refs;
    std::vector<ParamRef> all_refs;

    void bind_refs() {
        vae_refs = model.vae_params();
        cox_refs = model.cox_params();
        all_refs = model.params();
    }
};

std::vector<NamedTensor> snapshot_params(const std::vector<ParamRef>& refs) {
    std::vector<NamedTensor> out;
    out.reserve(refs.size());
    for (const auto& p : refs)
        out.push_back({p.name, p.tensor->clone_values()});
    return out;
}

AdamSnapshot snapshot_adam(const AdamOptimizer& opt,
                           const std::vector<ParamRef>& refs) {
    AdamSnapshot snap;
    snap.t = opt.step_count();
    const auto& m = opt.first_moments();
    const auto& v = opt.second_moments();
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const Shape& shape = refs[i].tensor->shape();
        if (i < m.size()) {
            snap.m.push_back({refs[i].name, Tensor(shape, m[i])});
            snap.v.push_back({refs[i].name, Tensor(shape, v[i])});
        } else { // optimizer never stepped; moments are implicit zeros
            snap.m.push_back({refs[i].name, Tensor::zeros(shape)});
            snap.v.push_back({refs[i].name, Tensor::zeros(shape)});
        }
    }
    return snap;
}

Checkpoint make_checkpoint(const TrainState& st) {
    Checkpoint ckpt;
    ckpt.config = st.cfg;
    ckpt.params = snapshot_params(st.all_refs);
    ckpt.adam_vae = snapshot_adam(st.adam_vae, st.vae_refs);
    ckpt.adam_cox = snapshot_adam(st.adam_cox, st.cox_refs);
    ckpt.step = st.step;
    ckpt.rng_state = sampler_blob(st.rng, st.sampler);
    ckpt.sampler = st.sampler;
    return ckpt;
}

void restore_adam(AdamOptimizer& opt, const AdamSnapshot& snap,
                  const std::vector<ParamRef>& refs) {
    if (snap.m.size() != refs.size() || snap.v.size() != refs.size())
        throw FormatError("checkpoint: optimizer record count mismatch");
    std::vector<std::vector<double>> m, v;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (snap.m[i].name != refs[i].name || snap.v[i].name != refs[i].name)
            throw FormatError("checkpoint: optimizer record for unknown parameter " +
                              snap.m[i].name);
        if (snap.m[i].tensor.shape() != refs[i].tensor->shape())
            throw FormatError("checkpoint: optimizer moment shape mismatch for " +
                              refs[i].name);
        m.emplace_back(snap.m[i].tensor.values().begin(),
                       snap.m[i].tensor.values().end());
        v.emplace_back(snap.v[i].tensor.values().begin(),
                       snap.v[i].tensor.values().end());
    }
    opt.restore(std::move(m), std::move(v), snap.t);
}

Tensor gather_rows(const Tensor& images, std::span<const std::size_t> rows) {
    const std::size_t pixels = images.shape()[1];
    std::vector<double> out(rows.size() * pixels);
    const auto src = images.values();
    for (std::size_t k = 0; k < rows.size(); ++k)
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[k] * pixels),
                    pixels,
                    out.begin() + static_cast<std::ptrdiff_t>(k * pixels));
    return Tensor({rows.size(), pixels}, std::move(out));
}

Tensor draw_eps(Rng& rng, std::size_t rows, std::size_t cols) {
    std::vector<double> eps(rows * cols);
    for (double& e : eps) e = rng.normal();
    return Tensor({rows, cols}, std::move(eps));
}

double validation_cindex(const CoxVae& model, const Dataset& val_ds) {
    const auto risks = risk_scores(model, val_ds.images);
    return concordance_index(val_ds.table, risks);
}

TrainResult run_loop(TrainState& st, const Dataset& train_ds, const Dataset& val_ds) {
    const std::size_t n = train_ds.size();
    const std::size_t batch = st.cfg.batch_size;
    if (batch > n)
        throw ConfigError("batch_size " + std::to_string(batch) +
                          " exceeds training set size " + std::to_string(n));
    if (st.cfg.full_batch_cox && n > 512)
        throw ConfigError("full_batch_cox requires a training set of at most "
                          "512 samples, got " + std::to_string(n));
    if (val_ds.size() == 0) throw ConfigError("validation set is empty");

    TrainResult result;
    while (st.step < st.cfg.total_steps) {
        // Snapshot the cheap mutable state so an abort can reconstruct the
        // end of the previous step exactly.
        const std::string pre_rng = st.rng.serialize();
        const SamplerState pre_sampler = st.sampler;

        if (st.sampler.order.size() != n ||
            st.sampler.cursor + batch > st.sampler.order.size()) {
            st.sampler.order.resize(n);
            std::iota(st.sampler.order.begin(), st.sampler.order.end(), 0u);
            st.rng.shuffle(st.sampler.order);
            st.sampler.cursor = 0;
        }
        std::vector<std::size_t> rows(batch);
        for (std::size_t k = 0; k < batch; ++k)
            rows[k] = st.sampler.order[st.sampler.cursor + k];
        st.sampler.cursor += batch;
        const std::size_t this_step = st.step + 1;

        Graph g;
        st.model.watch_all(g);

        const Tensor x = gather_rows(train_ds.images, rows);
        const Tensor eps = draw_eps(st.rng, batch, st.cfg.latent_dim);
        auto [mu, logvar] = st.model.encoder.forward(x);
        Tensor z = reparameterize(mu, logvar, eps);
        Tensor logits = st.model.decoder.forward(z);
        Tensor recon = recon_nll(logits, x);
        Tensor kl = kl_divergence(mu, logvar);
        Tensor elbo = add(recon, scale(kl, st.cfg.beta));

        CoxPartial cox;
        if (st.cfg.full_batch_cox) {
            // Risk sets over the whole training cohort each step.
            const Tensor eps_full = draw_eps(st.rng, n, st.cfg.latent_dim);
            auto [mu_f, logvar_f] = st.model.encoder.forward(train_ds.images);
            Tensor z_f = reparameterize(mu_f, logvar_f, eps_full);
            Tensor r_f = cox_head(st.model.cox, z_f);
            cox = cox_partial_nll(r_f, train_ds.table.time, train_ds.table.event);
        } else {
            std::vector<double> bt(batch);
            std::vector<std::uint8_t> be(batch);
            for (std::size_t k = 0; k < batch; ++k) {
                bt[k] = train_ds.table.time[rows[k]];
                be[k] = train_ds.table.event[rows[k]];
            }
            Tensor r = cox_head(st.model.cox, z);
            cox = cox_partial_nll(r, bt, be);
        }

        Tensor total = combined_loss(elbo, cox.value, st.cfg.tau);

        HistoryRow row;
        row.step = this_step;
        row.total = total.item();
        row.recon = recon.item();
        row.kl = kl.item();
        row.cox = cox.value.item();
        row.n_events = cox.n_events;

        if (!std::isfinite(row.total)) {
            st.model.detach_all();
            result.aborted_at = this_step;
            Checkpoint last_good = make_checkpoint(st);
            last_good.rng_state = pre_rng + "-sampler-see-below";
            // rebuild the blob from the pre-step snapshot
            Rng pre = Rng::deserialize(pre_rng);
            last_good.sampler = pre_sampler;
            last_good.rng_state = sampler_blob(pre, pre_sampler);
            result.checkpoint = std::move(last_good);
            return result;
        }

        g.backward(total);

        bool grads_ok = true;
        for (const auto& p : st.all_refs)
            if (!all_finite(p.tensor->grad())) { grads_ok = false; break; }
        if (!grads_ok) {
            st.model.detach_all();
            result.aborted_at = this_step;
            Checkpoint last_good = make_checkpoint(st);
            Rng pre = Rng::deserialize(pre_rng);
            last_good.sampler = pre_sampler;
            last_good.rng_state = sampler_blob(pre, pre_sampler);
            result.checkpoint = std::move(last_good);
            return result;
        }

        st.adam_vae.step(st.vae_refs);
        if (cox.n_events > 0) st.adam_cox.step(st.cox_refs);
        st.model.detach_all();
        st.step = this_step;

        if (this_step % st.cfg.eval_every == 0 || this_step == st.cfg.total_steps)
            row.val_cindex = validation_cindex(st.model, val_ds);
        result.history.push_back(std::move(row));
    }
    result.checkpoint = make_checkpoint(st);
    return result;
}

} // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& train_ds,
                  const Dataset& val_ds) {
    cfg.validate();
    train_ds.validate();
    val_ds.validate();
    if (train_ds.pixels() != val_ds.pixels())
        throw ConfigError("train: datasets have different pixel counts");
    TrainState st;
    st.cfg = cfg;
    ModelArch arch{train_ds.pixels(), cfg.hidden_width, cfg.latent_dim};
    st.model = CoxVae::init(arch, cfg.seed);
    st.adam_vae = AdamOptimizer({cfg.lr_vae, 0.9, 0.999, 1e-8});
    st.adam_cox = AdamOptimizer({cfg.lr_cox, 0.9, 0.999, 1e-8});
    // Separate stream offset keeps loop draws distinct from init draws.
    st.rng = Rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    st.bind_refs();
    return run_loop(st, train_ds, val_ds);
}

TrainResult resume_training(const Checkpoint& ckpt, const Dataset& train_ds,
                            const Dataset& val_ds) {
    ckpt.config.validate();
    train_ds.validate();
    val_ds.validate();
    TrainState st;
    st.cfg = ckpt.config;
    st.model = model_from_checkpoint(ckpt);
    st.adam_vae = AdamOptimizer({st.cfg.lr_vae, 0.9, 0.999, 1e-8});
    st.adam_cox = AdamOptimizer({st.cfg.lr_cox, 0.9, 0.999, 1e-8});
    st.bind_refs();
    restore_adam(st.adam_vae, ckpt.adam_vae, st.vae_refs);
    restore_adam(st.adam_cox, ckpt.adam_cox, st.cox_refs);
    st.step = ckpt.step;
    parse_sampler_blob(ckpt.rng_state, st.rng, st.sampler);
    if (!st.sampler.order.empty() && st.sampler.order.size() != train_ds.size())
        throw ContractError("resume_training: sampler state does not match the "
                            "training set size");
    return run_loop(st, train_ds, val_ds);
}

CoxVae model_from_checkpoint(const Checkpoint& ckpt) {
    std::size_t pixels = 0;
    for (const auto& rec : ckpt.params)
        if (rec.name == "enc.in.w") pixels = rec.tensor.shape()[1];
    if (pixels == 0)
        throw FormatError("checkpoint: missing parameter enc.in.w");
    ModelArch arch{pixels, ckpt.config.hidden_width, ckpt.config.latent_dim};
    CoxVae model = CoxVae::init(arch, ckpt.config.seed);
    auto refs = model.params();
    if (refs.size() != ckpt.params.size())
        throw FormatError("checkpoint: expected " + std::to_string(refs.size()) +
                          " parameter records, found " +
                          std::to_string(ckpt.params.size()));
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& rec = ckpt.params[i];
        if (rec.name != refs[i].name)
            throw FormatError("checkpoint: unexpected parameter record '" +
                              rec.name + "' (expected '" + refs[i].name + "')");
        if (rec.tensor.shape() != refs[i].tensor->shape())
            throw FormatError("checkpoint: shape mismatch for parameter " +
                              rec.name + ": " +
                              shape_to_string(rec.tensor.shape()) + " vs " +
                              shape_to_string(refs[i].tensor->shape()));
        auto dst = refs[i].tensor->values_mut();
        const auto src = rec.tensor.values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return model;
}

// ---- checkpoint file format (SVCK) -----------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'V', 'C', 'K'};

void write_record(binio::Writer& w, const NamedTensor& rec) {
    w.str(rec.name);
    w.u32(static_cast<std::uint32_t>(rec.tensor.rank()));
    for (std::size_t d : rec.tensor.shape())
        w.u32(static_cast<std::uint32_t>(d));
    for (double v : rec.tensor.values()) w.f64(v);
}

NamedTensor read_record(binio::Reader& r) {
    NamedTensor rec;
    rec.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8)
        throw FormatError("checkpoint: implausible rank " + std::to_string(rank) +
                          " for parameter " + rec.name);
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = r.u32();
        count *= d;
    }
    std::vector<double> values(count);
    for (double& v : values) v = r.f64();
    rec.tensor = Tensor(std::move(shape), std::move(values));
    return rec;
}

void write_adam(binio::Writer& w, const AdamSnapshot& snap) {
    w.u64(snap.t);
    w.u32(static_cast<std::uint32_t>(snap.m.size()));
    for (const auto& rec : snap.m) write_record(w, rec);
    for (const auto& rec : snap.v) write_record(w, rec);
}

AdamSnapshot read_adam(binio::Reader& r) {
    AdamSnapshot snap;
    snap.t = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) snap.m.push_back(read_record(r));
    for (std::uint32_t i = 0; i < count; ++i) snap.v.push_back(read_record(r));
    return snap;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    binio::Writer w(path);
    w.bytes(kCheckpointMagic, 4);
    w.u32(1);
    w.str(train_config_to_json(ckpt.config).dump());
    w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& rec : ckpt.params) write_record(w, rec);
    write_adam(w, ckpt.adam_vae);
    write_adam(w, ckpt.adam_cox);
    w.u64(ckpt.step);
    w.str(ckpt.rng_state);
    w.trailer_crc();
    w.close();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    binio::Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError(path.string() + ": bad checkpoint magic");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError(path.string() + ": incompatible checkpoint version " +
                          std::to_string(version) + " (expected 1)");
    Checkpoint ckpt;
    ckpt.config = train_config_from_json(json::parse(r.str()));
    const std::uint32_t n_params = r.u32();
    for (std::uint32_t i = 0; i < n_params; ++i)
        ckpt.params.push_back(read_record(r));
    ckpt.adam_vae = read_adam(r);
    ckpt.adam_cox = read_adam(r);
    ckpt.step = r.u64();
    ckpt.rng_state = r.str();
    const std::uint32_t want = r.crc_since(0);
    const std::uint32_t got = r.u32();
    if (want != got)
        throw FormatError(path.string() + ": checkpoint checksum mismatch");
    {
        Rng scratch(0);
        SamplerState sampler;
        parse_sampler_blob(ckpt.rng_state, scratch, sampler);
        ckpt.sampler = sampler;
    }
    return ckpt;
}

// ---- evaluation --------------------------------------------------------------

Tensor encode_mu(const CoxVae& model, const Tensor& images) {
    auto [mu, logvar] = model.encoder.forward(images);
    (void)logvar;
    return mu;
}

std::vector<double> risk_scores(const CoxVae& model, const Tensor& images) {
    const Tensor r = cox_head(model.cox, encode_mu(model, images));
    return {r.values().begin(), r.values().end()};
}

EvalMetrics evaluate(const CoxVae& model, const Dataset& eval_ds,
                     const Dataset& baseline_ds) {
    eval_ds.validate();
    baseline_ds.validate();

    auto [mu, logvar] = model.encoder.forward(eval_ds.images);
    const Tensor r_eval = cox_head(model.cox, mu);
    const std::vector<double> risks(r_eval.values().begin(),
                                    r_eval.values().end());
    const double kl = kl_divergence(mu, logvar).item();

    const auto base_risks = risk_scores(model, baseline_ds.images);
    const StepFunction h0 = breslow_baseline(baseline_ds.table, base_risks);
    std::vector<StepFunction> curves;
    curves.reserve(eval_ds.size());
    for (double r : risks) curves.push_back(survival_curve(h0, r));

    EvalMetrics m;
    m.n = eval_ds.size();
    m.n_events = static_cast<int>(eval_ds.table.n_events());
    m.cindex = concordance_index(eval_ds.table, risks);
    const auto grid = default_ibs_grid(eval_ds.table);
    m.ibs = integrated_brier(grid, eval_ds.table, curves,
                             censoring_km(eval_ds.table));

    // Metric-bound assertions on the evaluation path.
    if (!(m.cindex >= 0.0 && m.cindex <= 1.0))
        throw ContractError("evaluate: C-index out of [0,1]");
    if (!(m.ibs >= 0.0 && m.ibs <= 1.0))
        throw ContractError("evaluate: IBS out of [0,1]");
    if (!(kl >= -1e-9))
        throw ContractError("evaluate: negative KL divergence");
    const StepFunction km = kaplan_meier(eval_ds.table);
    for (std::size_t i = 1; i < km.step_values().size(); ++i)
        if (km.step_values()[i] > km.step_values()[i - 1] + 1e-12)
            throw ContractError("evaluate: Kaplan-Meier estimate increased");
    for (std::size_t i = 1; i < h0.step_values().size(); ++i)
        if (h0.step_values()[i] < h0.step_values()[i - 1] - 1e-12)
            throw ContractError("evaluate: Breslow baseline decreased");
    return m;
}

void write_history_csv(const std::vector<HistoryRow>& history,
                       const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "step,total,recon,kl,cox,n_events,val_cindex\n";
    char buf[40];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto& row : history) {
        out << row.step << ',' << fmt(row.total) << ',' << fmt(row.recon) << ','
            << fmt(row.kl) << ',' << fmt(row.cox) << ',' << row.n_events << ',';
        if (row.val_cindex) out << fmt(*row.val_cindex);
        out << '\n';
    }
    out.close();
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace coxvae
