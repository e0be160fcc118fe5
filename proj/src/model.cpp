#include "aosense/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "aosense/rng.hpp"
#include "aosense/volume.hpp"

namespace aosense {

namespace {

constexpr double kLnEps = 1e-5;  // layer norm epsilon

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x / S(M_SQRT2)));
}

template <class S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x / S(M_SQRT2)));
    const S pdf = std::exp(S(-0.5) * x * x) / S(std::sqrt(2.0 * M_PI));
    return cdf + x * pdf;
}

template <class S>
void init_matrix(Mat<S>& w, CounterRng& rng, double bound) {
    for (long long i = 0; i < w.size(); ++i)
        w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace

// ---------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    if (stages.empty()) throw std::invalid_argument("at least one stage required");
    if (z_out != kNumModes) throw std::invalid_argument("z_out must be 15");
    for (const auto& st : stages) {
        if (st.patch <= 0 || d % st.patch != 0)
            throw std::invalid_argument("d must be divisible by every patch size");
        if (st.heads < 1 || st.head_dim() < 1)
            throw std::invalid_argument("heads must fit into the embed dim");
        if (st.layers < 1) throw std::invalid_argument("layers must be >= 1");
    }
}

long long ModelConfig::param_count() const {
    long long total = 0;
    const long long rpe_dim = 1 + 2 * rpe_m;
    for (const auto& st : stages) {
        const long long eps = st.embed_dim();
        const long long mlp = st.mlp_dim();
        const long long hd = static_cast<long long>(st.heads) * st.head_dim();
        total += (st.patch * st.patch + rpe_dim) * eps + eps;  // projection
        total += st.layers * (3 * (hd * eps + hd)      // qkv
                              + (eps * hd + eps)       // attention out
                              + 2 * (2 * eps)          // two layer norms
                              + (eps * mlp + mlp)      // mlp in
                              + (mlp * eps + eps));    // mlp out
    }
    const long long k_last = (d / stages.back().patch) * (d / stages.back().patch);
    total += static_cast<long long>(z_out) * (planes * k_last) + z_out;  // head
    return total;
}

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.stages = {{32, 3, 6}, {16, 3, 6}};
    return c;
}

ModelConfig ModelConfig::small_() {
    ModelConfig c;
    c.stages = {{32, 4, 8}, {16, 4, 8}};
    return c;
}

ModelConfig ModelConfig::probe() {
    ModelConfig c;
    c.stages = {{32, 1, 2}, {16, 1, 2}};
    return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : c.stages)
        stages.push_back({{"patch", st.patch},
                          {"layers", st.layers},
                          {"heads", st.heads},
                          {"dropout", st.dropout},
                          {"stochastic_depth", st.stochastic_depth}});
    j = {{"stages", stages}, {"d", c.d},       {"planes", c.planes},
         {"z_out", c.z_out}, {"rpe_m", c.rpe_m}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.stages.clear();
    for (const auto& st : j.at("stages")) {
        StageConfig sc;
        sc.patch = st.at("patch").get<int>();
        sc.layers = st.at("layers").get<int>();
        sc.heads = st.at("heads").get<int>();
        sc.dropout = st.value("dropout", 0.1);
        sc.stochastic_depth = st.value("stochastic_depth", 0.1);
        c.stages.push_back(sc);
    }
    c.d = j.value("d", 64);
    c.planes = j.value("planes", 6);
    c.z_out = j.value("z_out", 15);
    c.rpe_m = j.value("rpe_m", 16);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"batch", c.batch},
         {"epochs", c.epochs},
         {"warmup_epochs", c.warmup_epochs},
         {"peak_lr", c.peak_lr},
         {"weight_decay", c.weight_decay},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"use_lamb", c.use_lamb},
         {"seed", c.seed},
         {"max_steps", c.max_steps},
         {"stop_step", c.stop_step}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.batch = j.value("batch", 16);
    c.epochs = j.value("epochs", 10);
    c.warmup_epochs = j.value("warmup_epochs", 1.0);
    c.peak_lr = j.value("peak_lr", 1e-3);
    c.weight_decay = j.value("weight_decay", 1e-3);
    c.beta1 = j.value("beta1", 0.9);
    c.beta2 = j.value("beta2", 0.99);
    c.use_lamb = j.value("use_lamb", false);
    c.seed = j.value("seed", 0ULL);
    c.max_steps = j.value("max_steps", 0);
    c.stop_step = j.value("stop_step", 0);
}

// ---------------------------------------------------------------------
// Patchify / merge / RPE

template <class S>
Mat<S> patchify(const std::vector<Mat<S>>& planes, int patch) {
    if (planes.empty()) throw std::invalid_argument("no planes");
    const int d = static_cast<int>(planes[0].rows());
    if (d % patch != 0) throw std::invalid_argument("d not divisible by patch");
    const int per_side = d / patch;
    const int k = per_side * per_side;
    const int l = static_cast<int>(planes.size());
    Mat<S> tokens(l * k, patch * patch);
    for (int pl = 0; pl < l; ++pl)
        for (int ty = 0; ty < per_side; ++ty)
            for (int tx = 0; tx < per_side; ++tx) {
                const int row = pl * k + ty * per_side + tx;
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        tokens(row, y * patch + x) =
                            planes[static_cast<std::size_t>(pl)](ty * patch + y,
                                                                 tx * patch + x);
            }
    return tokens;
}

template <class S>
std::vector<Mat<S>> merge_patches(const Mat<S>& tokens, int planes, int d, int patch) {
    const int per_side = d / patch;
    const int k = per_side * per_side;
    if (tokens.rows() != planes * k || tokens.cols() != patch * patch)
        throw std::invalid_argument("token shape does not match the tiling");
    std::vector<Mat<S>> out(static_cast<std::size_t>(planes));
    for (auto& m : out) m = Mat<S>::Zero(d, d);
    for (int pl = 0; pl < planes; ++pl)
        for (int ty = 0; ty < per_side; ++ty)
            for (int tx = 0; tx < per_side; ++tx) {
                const int row = pl * k + ty * per_side + tx;
                for (int y = 0; y < patch; ++y)
                    for (int x = 0; x < patch; ++x)
                        out[static_cast<std::size_t>(pl)](ty * patch + y, tx * patch + x) =
                            tokens(row, y * patch + x);
            }
    return out;
}

template <class S>
Mat<S> radial_encoding(int patch, int d, int m) {
    if (d % patch != 0) throw std::invalid_argument("d not divisible by patch");
    const int per_side = d / patch;
    const int k = per_side * per_side;
    Mat<S> rpe(k, 1 + 2 * m);
    const double centre = d / 2.0 - 0.5;  // pixel-centre convention
    double r_max = 0.0;
    std::vector<std::pair<double, double>> polar(static_cast<std::size_t>(k));
    for (int ty = 0; ty < per_side; ++ty)
        for (int tx = 0; tx < per_side; ++tx) {
            const double cy = ty * patch + patch / 2.0 - 0.5 - centre;
            const double cx = tx * patch + patch / 2.0 - 0.5 - centre;
            const double r = std::hypot(cy, cx);
            polar[static_cast<std::size_t>(ty * per_side + tx)] = {r, std::atan2(cy, cx)};
            r_max = std::max(r_max, r);
        }
    if (r_max <= 0.0) r_max = 1.0;
    for (int i = 0; i < k; ++i) {
        const auto [r, theta] = polar[static_cast<std::size_t>(i)];
        rpe(i, 0) = static_cast<S>(r / r_max);
        for (int h = 1; h <= m; ++h) {
            rpe(i, 2 * h - 1) = static_cast<S>(std::sin(h * theta));
            rpe(i, 2 * h) = static_cast<S>(std::cos(h * theta));
        }
    }
    return rpe;
}

// ---------------------------------------------------------------------
// Layers

template <class S>
struct Dense {
    std::string name;
    Mat<S> w;  // out x in
    Vec<S> b;
    Mat<S> gw;
    Vec<S> gb;
    Mat<S> x_cache;

    void init(const std::string& n, int in, int out, CounterRng& rng) {
        name = n;
        w.resize(out, in);
        b = Vec<S>::Zero(out);
        const double bound = std::sqrt(6.0 / (in + out));
        init_matrix(w, rng, bound);
        gw = Mat<S>::Zero(out, in);
        gb = Vec<S>::Zero(out);
    }
    Mat<S> forward(const Mat<S>& x) {
        x_cache = x;
        Mat<S> y = x * w.transpose();
        y.rowwise() += b.transpose();
        return y;
    }
    Mat<S> backward(const Mat<S>& dy) {
        gw.noalias() += dy.transpose() * x_cache;
        gb.noalias() += dy.colwise().sum().transpose();
        return dy * w;
    }
};

template <class S>
struct LayerNorm {
    std::string name;
    Vec<S> gamma, beta, ggamma, gbeta;
    Mat<S> xhat_cache;
    Vec<S> inv_std_cache;

    void init(const std::string& n, int dim) {
        name = n;
        gamma = Vec<S>::Ones(dim);
        beta = Vec<S>::Zero(dim);
        ggamma = Vec<S>::Zero(dim);
        gbeta = Vec<S>::Zero(dim);
    }
    Mat<S> forward(const Mat<S>& x) {
        const int n = static_cast<int>(x.rows());
        const int dim = static_cast<int>(x.cols());
        xhat_cache.resize(n, dim);
        inv_std_cache.resize(n);
        Mat<S> y(n, dim);
        for (int i = 0; i < n; ++i) {
            const S mean = x.row(i).mean();
            const S var = (x.row(i).array() - mean).square().mean();
            const S inv = S(1) / std::sqrt(var + S(kLnEps));
            inv_std_cache(i) = inv;
            xhat_cache.row(i) = (x.row(i).array() - mean) * inv;
            y.row(i) =
                xhat_cache.row(i).cwiseProduct(gamma.transpose()) + beta.transpose();
        }
        return y;
    }
    Mat<S> backward(const Mat<S>& dy) {
        const int n = static_cast<int>(dy.rows());
        const int dim = static_cast<int>(dy.cols());
        Mat<S> dx(n, dim);
        for (int i = 0; i < n; ++i) {
            ggamma += dy.row(i).cwiseProduct(xhat_cache.row(i)).transpose();
            gbeta += dy.row(i).transpose();
            Eigen::Matrix<S, 1, Eigen::Dynamic> dyg =
                dy.row(i).cwiseProduct(gamma.transpose());
            const S sum_dyg = dyg.sum();
            const S sum_dyg_xhat = dyg.cwiseProduct(xhat_cache.row(i)).sum();
            dx.row(i) = (S(dim) * dyg.array() - sum_dyg -
                         xhat_cache.row(i).array() * sum_dyg_xhat) *
                        (inv_std_cache(i) / S(dim));
        }
        return dx;
    }
};

// Inverted dropout keyed by (seed, step, sample, site); identity in eval.
template <class S>
struct Dropout {
    double rate = 0.1;
    std::uint64_t site = 0;
    Mat<S> mask;

    Mat<S> forward(const Mat<S>& x, const TrainRng& rng) {
        if (!rng.active || rate <= 0.0) {
            mask.resize(0, 0);
            return x;
        }
        CounterRng r(rng.seed, fold_stream(rng.step, rng.sample, site));
        mask.resize(x.rows(), x.cols());
        const S scale = S(1.0 / (1.0 - rate));
        for (long long i = 0; i < x.size(); ++i)
            mask.data()[i] = (r.uniform() < rate) ? S(0) : scale;
        return x.cwiseProduct(mask);
    }
    Mat<S> backward(const Mat<S>& dy) {
        if (mask.size() == 0) return dy;
        return dy.cwiseProduct(mask);
    }
};

template <class S>
struct MultiHeadAttention {
    int heads = 1;
    int dim = 0;       // token width (eps)
    int head_dim = 0;  // per-head width, floor(eps / h)
    Dense<S> qkv;
    Dense<S> out;
    Dropout<S> drop;
    Mat<S> q_, k_, v_;
    std::vector<Mat<S>> attn_;
    Mat<S> concat_;

    void init(const std::string& n, int d, int h, int dh, double dropout,
              std::uint64_t site, CounterRng& rng) {
        heads = h;
        dim = d;
        head_dim = dh;
        qkv.init(n + ".qkv", d, 3 * h * dh, rng);
        out.init(n + ".out", h * dh, d, rng);
        drop.rate = dropout;
        drop.site = site;
    }

    Mat<S> forward(const Mat<S>& x, const TrainRng& rng) {
        const int n = static_cast<int>(x.rows());
        const int dh = head_dim;
        const int joint = heads * dh;
        Mat<S> qkv_out = qkv.forward(x);
        q_ = qkv_out.leftCols(joint);
        k_ = qkv_out.middleCols(joint, joint);
        v_ = qkv_out.rightCols(joint);

        attn_.assign(static_cast<std::size_t>(heads), Mat<S>());
        concat_.resize(n, joint);
        const S scale = S(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int h = 0; h < heads; ++h) {
            auto qh = q_.middleCols(h * dh, dh);
            auto kh = k_.middleCols(h * dh, dh);
            auto vh = v_.middleCols(h * dh, dh);
            Mat<S> scores = qh * kh.transpose() * scale;
            for (int i = 0; i < n; ++i) {
                const S mx = scores.row(i).maxCoeff();
                scores.row(i) = (scores.row(i).array() - mx).exp();
                scores.row(i) /= scores.row(i).sum();
            }
            attn_[static_cast<std::size_t>(h)] = scores;
            concat_.middleCols(h * dh, dh) = scores * vh;
        }
        Mat<S> y = out.forward(concat_);
        return drop.forward(y, rng);
    }

    Mat<S> backward(const Mat<S>& dy_in) {
        const int n = static_cast<int>(dy_in.rows());
        const int dh = head_dim;
        const int joint = heads * dh;
        Mat<S> dy = drop.backward(dy_in);
        Mat<S> dconcat = out.backward(dy);

        Mat<S> dqkv(n, 3 * joint);
        const S scale = S(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int h = 0; h < heads; ++h) {
            auto kh = k_.middleCols(h * dh, dh);
            auto vh = v_.middleCols(h * dh, dh);
            auto qh = q_.middleCols(h * dh, dh);
            const Mat<S>& a = attn_[static_cast<std::size_t>(h)];
            Mat<S> dh_out = dconcat.middleCols(h * dh, dh);
            Mat<S> da = dh_out * vh.transpose();
            Mat<S> dv = a.transpose() * dh_out;
            Mat<S> dscores(n, n);
            for (int i = 0; i < n; ++i) {
                const S dot = da.row(i).cwiseProduct(a.row(i)).sum();
                dscores.row(i) = a.row(i).array() * (da.row(i).array() - dot);
            }
            dqkv.middleCols(h * dh, dh) = dscores * kh * scale;
            dqkv.middleCols(joint + h * dh, dh) = dscores.transpose() * qh * scale;
            dqkv.middleCols(2 * joint + h * dh, dh) = dv;
        }
        return qkv.backward(dqkv);
    }
};

template <class S>
struct Mlp {
    Dense<S> fc1, fc2;
    Dropout<S> drop1, drop2;
    Mat<S> pre_act_;

    void init(const std::string& n, int d, int hidden, double dropout,
              std::uint64_t site, CounterRng& rng) {
        fc1.init(n + ".fc1", d, hidden, rng);
        fc2.init(n + ".fc2", hidden, d, rng);
        drop1.rate = dropout;
        drop1.site = site;
        drop2.rate = dropout;
        drop2.site = site + 1;
    }
    Mat<S> forward(const Mat<S>& x, const TrainRng& rng) {
        pre_act_ = fc1.forward(x);
        Mat<S> a = pre_act_.unaryExpr([](S v) { return gelu(v); });
        a = drop1.forward(a, rng);
        Mat<S> y = fc2.forward(a);
        return drop2.forward(y, rng);
    }
    Mat<S> backward(const Mat<S>& dy_in) {
        Mat<S> dy = drop2.backward(dy_in);
        Mat<S> da = fc2.backward(dy);
        da = drop1.backward(da);
        Mat<S> dpre =
            da.cwiseProduct(pre_act_.unaryExpr([](S v) { return gelu_grad(v); }));
        return fc1.backward(dpre);
    }
};

template <class S>
struct TransformerLayer {
    MultiHeadAttention<S> mha;
    LayerNorm<S> ln1, ln2;
    Mlp<S> mlp;
    double sd_rate = 0.0;
    std::uint64_t sd_site = 0;
    bool drop_attn_ = false, drop_mlp_ = false;

    void init(const std::string& n, int d, int h, int dh, int hidden, double dropout,
              double sd, std::uint64_t site, CounterRng& rng) {
        mha.init(n + ".mha", d, h, dh, dropout, site, rng);
        ln1.init(n + ".ln1", d);
        ln2.init(n + ".ln2", d);
        mlp.init(n + ".mlp", d, hidden, dropout, site + 2, rng);
        sd_rate = sd;
        sd_site = site + 4;
    }

    // z1 = LN(MHA(z)) + z, z2 = LN(MLP(z1)) + z1 (post-norm residuals).
    Mat<S> forward(const Mat<S>& z, const TrainRng& rng, const std::string& lname) {
        drop_attn_ = drop_mlp_ = false;
        if (rng.active && sd_rate > 0.0) {
            CounterRng r(rng.seed, fold_stream(rng.step, rng.sample, sd_site));
            drop_attn_ = r.uniform() < sd_rate;
            drop_mlp_ = r.uniform() < sd_rate;
        }
        Mat<S> z1;
        if (drop_attn_) {
            z1 = z;
        } else {
            Mat<S> branch = ln1.forward(mha.forward(z, rng));
            if (rng.active && sd_rate > 0.0) branch *= S(1.0 / (1.0 - sd_rate));
            z1 = branch + z;
        }
        Mat<S> z2;
        if (drop_mlp_) {
            z2 = z1;
        } else {
            Mat<S> branch = ln2.forward(mlp.forward(z1, rng));
            if (rng.active && sd_rate > 0.0) branch *= S(1.0 / (1.0 - sd_rate));
            z2 = branch + z1;
        }
        if (!z2.allFinite())
            throw std::runtime_error("non-finite activations in layer " + lname);
        return z2;
    }

    Mat<S> backward(const Mat<S>& dz2, bool sd_active) {
        Mat<S> dz1 = dz2;
        if (!drop_mlp_) {
            Mat<S> dbranch = dz2;
            if (sd_active && sd_rate > 0.0) dbranch *= S(1.0 / (1.0 - sd_rate));
            dz1 += mlp.backward(ln2.backward(dbranch));
        }
        Mat<S> dz = dz1;
        if (!drop_attn_) {
            Mat<S> dbranch = dz1;
            if (sd_active && sd_rate > 0.0) dbranch *= S(1.0 / (1.0 - sd_rate));
            dz += mha.backward(ln1.backward(dbranch));
        }
        return dz;
    }
};

template <class S>
struct StageModule {
    StageConfig cfg;
    int d = 64;
    int planes = 6;
    Mat<S> rpe;
    Dense<S> proj;
    std::vector<TransformerLayer<S>> layers;
    std::string name;
    std::vector<Mat<S>> input_planes_;
    bool train_active_ = false;

    std::vector<Mat<S>> forward(const std::vector<Mat<S>>& in, const TrainRng& rng) {
        input_planes_ = in;
        train_active_ = rng.active;
        Mat<S> patches = patchify(in, cfg.patch);
        const int k = static_cast<int>(rpe.rows());
        Mat<S> with_rpe(patches.rows(), patches.cols() + rpe.cols());
        with_rpe.leftCols(patches.cols()) = patches;
        for (int row = 0; row < patches.rows(); ++row)
            with_rpe.row(row).tail(rpe.cols()) = rpe.row(row % k);
        Mat<S> z = proj.forward(with_rpe);
        for (std::size_t li = 0; li < layers.size(); ++li)
            z = layers[li].forward(z, rng, name + ".layer" + std::to_string(li));
        auto merged = merge_patches(z, planes, d, cfg.patch);
        for (int pl = 0; pl < planes; ++pl)
            merged[static_cast<std::size_t>(pl)] += in[static_cast<std::size_t>(pl)];
        return merged;
    }

    std::vector<Mat<S>> backward(const std::vector<Mat<S>>& dmerged) {
        Mat<S> dz = patchify(dmerged, cfg.patch);
        for (std::size_t li = layers.size(); li-- > 0;)
            dz = layers[li].backward(dz, train_active_);
        Mat<S> dwith_rpe = proj.backward(dz);
        Mat<S> dpatches = dwith_rpe.leftCols(cfg.patch * cfg.patch);
        auto dinput = merge_patches(dpatches, planes, d, cfg.patch);
        for (int pl = 0; pl < planes; ++pl)
            dinput[static_cast<std::size_t>(pl)] +=
                dmerged[static_cast<std::size_t>(pl)];  // stage residual path
        return dinput;
    }
};

// ---------------------------------------------------------------------
// Model

template <class S>
Model<S>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t si = 0; si < cfg_.stages.size(); ++si) {
        auto stage = std::make_unique<StageModule<S>>();
        stage->cfg = cfg_.stages[si];
        stage->d = cfg_.d;
        stage->planes = cfg_.planes;
        stage->name = "stage" + std::to_string(si);
        stage->rpe = radial_encoding<S>(stage->cfg.patch, cfg_.d, cfg_.rpe_m);
        stage->layers.resize(static_cast<std::size_t>(stage->cfg.layers));
        stages_.push_back(std::move(stage));
    }
    const int k_last =
        (cfg_.d / cfg_.stages.back().patch) * (cfg_.d / cfg_.stages.back().patch);
    head_w_ = Mat<S>::Zero(cfg_.z_out, cfg_.planes * k_last);
    head_b_ = Vec<S>::Zero(cfg_.z_out);
    head_gw_ = Mat<S>::Zero(cfg_.z_out, cfg_.planes * k_last);
    head_gb_ = Vec<S>::Zero(cfg_.z_out);
    init_params(0);
}

template <class S>
Model<S>::~Model() = default;

template <class S>
void Model<S>::init_params(std::uint64_t seed) {
    CounterRng rng(seed, 0x494e4954ULL);
    int total_layers = 0;
    for (const auto& st : cfg_.stages) total_layers += st.layers;
    int layer_index = 0;
    const int rpe_dim = 1 + 2 * cfg_.rpe_m;
    for (auto& stage : stages_) {
        const int eps = stage->cfg.embed_dim();
        stage->proj.init(stage->name + ".proj",
                         stage->cfg.patch * stage->cfg.patch + rpe_dim, eps, rng);
        for (std::size_t li = 0; li < stage->layers.size(); ++li) {
            // Linear stochastic-depth ramp across the total depth.
            const double sd =
                stage->cfg.stochastic_depth *
                (total_layers > 1
                     ? static_cast<double>(layer_index) / (total_layers - 1)
                     : 0.0);
            stage->layers[li].init(
                stage->name + ".layer" + std::to_string(li), eps, stage->cfg.heads,
                stage->cfg.head_dim(), stage->cfg.mlp_dim(), stage->cfg.dropout, sd,
                (static_cast<std::uint64_t>(layer_index) + 1) * 100, rng);
            ++layer_index;
        }
    }
    // Zero head: the initial prediction is a safe no-op correction.
    head_w_.setZero();
    head_b_.setZero();
}

template <class S>
Vec<S> Model<S>::forward(const std::vector<S>& input, const TrainRng& rng) {
    const std::size_t expect = static_cast<std::size_t>(cfg_.planes) * cfg_.d * cfg_.d;
    if (input.size() != expect)
        throw std::invalid_argument("model input has the wrong size");
    std::vector<Mat<S>> planes(static_cast<std::size_t>(cfg_.planes));
    for (int pl = 0; pl < cfg_.planes; ++pl) {
        planes[static_cast<std::size_t>(pl)].resize(cfg_.d, cfg_.d);
        std::memcpy(planes[static_cast<std::size_t>(pl)].data(),
                    input.data() + static_cast<std::size_t>(pl) * cfg_.d * cfg_.d,
                    sizeof(S) * static_cast<std::size_t>(cfg_.d) * cfg_.d);
    }
    for (auto& stage : stages_) planes = stage->forward(planes, rng);

    // Global average over each final-stage tile, then the dense head.
    const int p_last = cfg_.stages.back().patch;
    Mat<S> tokens = patchify(planes, p_last);
    pooled_ = tokens.rowwise().mean();
    Vec<S> out = head_w_ * pooled_ + head_b_;
    if (!out.allFinite()) throw std::runtime_error("non-finite activations in head");
    return out;
}

template <class S>
Vec<S> Model<S>::forward(const FourierEmbedding& e) {
    if (cfg_.d != kEmbeddingSize || cfg_.planes != kEmbeddingPlanes)
        throw std::invalid_argument("model config does not match the embedding shape");
    std::vector<S> input(static_cast<std::size_t>(cfg_.planes) * cfg_.d * cfg_.d);
    for (int pl = 0; pl < cfg_.planes; ++pl)
        for (int i = 0; i < cfg_.d * cfg_.d; ++i)
            input[static_cast<std::size_t>(pl) * cfg_.d * cfg_.d + i] = static_cast<S>(
                e.planes[static_cast<std::size_t>(pl)][static_cast<std::size_t>(i)]);
    TrainRng eval_rng;  // inactive: eval forward consumes no RNG
    return forward(input, eval_rng);
}

template <class S>
void Model<S>::backward(const Vec<S>& dout) {
    head_gw_.noalias() += dout * pooled_.transpose();
    head_gb_ += dout;
    Vec<S> dpooled = head_w_.transpose() * dout;

    const int p_last = cfg_.stages.back().patch;
    const int per_side = cfg_.d / p_last;
    const int k = per_side * per_side;
    Mat<S> dtokens(cfg_.planes * k, p_last * p_last);
    for (int row = 0; row < dtokens.rows(); ++row)
        dtokens.row(row).setConstant(dpooled(row) / S(p_last * p_last));
    auto dplanes = merge_patches(dtokens, cfg_.planes, cfg_.d, p_last);
    for (std::size_t si = stages_.size(); si-- > 0;)
        dplanes = stages_[si]->backward(dplanes);
}

template <class S>
void Model<S>::zero_grad() {
    for (auto& t : tensors())
        std::memset(t.grad, 0, sizeof(S) * static_cast<std::size_t>(t.size));
}

template <class S>
std::vector<typename Model<S>::TensorRef> Model<S>::tensors() {
    std::vector<TensorRef> refs;
    auto add = [&](const std::string& name, Mat<S>& w, Mat<S>& g) {
        refs.push_back({name, w.data(), g.data(), w.size()});
    };
    auto addv = [&](const std::string& name, Vec<S>& w, Vec<S>& g) {
        refs.push_back({name, w.data(), g.data(), w.size()});
    };
    for (auto& stage : stages_) {
        add(stage->proj.name + ".w", stage->proj.w, stage->proj.gw);
        addv(stage->proj.name + ".b", stage->proj.b, stage->proj.gb);
        for (auto& layer : stage->layers) {
            add(layer.mha.qkv.name + ".w", layer.mha.qkv.w, layer.mha.qkv.gw);
            addv(layer.mha.qkv.name + ".b", layer.mha.qkv.b, layer.mha.qkv.gb);
            add(layer.mha.out.name + ".w", layer.mha.out.w, layer.mha.out.gw);
            addv(layer.mha.out.name + ".b", layer.mha.out.b, layer.mha.out.gb);
            addv(layer.ln1.name + ".gamma", layer.ln1.gamma, layer.ln1.ggamma);
            addv(layer.ln1.name + ".beta", layer.ln1.beta, layer.ln1.gbeta);
            add(layer.mlp.fc1.name + ".w", layer.mlp.fc1.w, layer.mlp.fc1.gw);
            addv(layer.mlp.fc1.name + ".b", layer.mlp.fc1.b, layer.mlp.fc1.gb);
            add(layer.mlp.fc2.name + ".w", layer.mlp.fc2.w, layer.mlp.fc2.gw);
            addv(layer.mlp.fc2.name + ".b", layer.mlp.fc2.b, layer.mlp.fc2.gb);
            addv(layer.ln2.name + ".gamma", layer.ln2.gamma, layer.ln2.ggamma);
            addv(layer.ln2.name + ".beta", layer.ln2.beta, layer.ln2.gbeta);
        }
    }
    refs.push_back({"head.w", head_w_.data(), head_gw_.data(), head_w_.size()});
    refs.push_back({"head.b", head_b_.data(), head_gb_.data(), head_b_.size()});
    return refs;
}

template <class S>
long long Model<S>::param_count() {
    long long total = 0;
    for (const auto& t : tensors()) total += t.size;
    return total;
}

template class Model<float>;
template class Model<double>;
template Mat<float> patchify(const std::vector<Mat<float>>&, int);
template Mat<double> patchify(const std::vector<Mat<double>>&, int);
template std::vector<Mat<float>> merge_patches(const Mat<float>&, int, int, int);
template std::vector<Mat<double>> merge_patches(const Mat<double>&, int, int, int);
template Mat<float> radial_encoding<float>(int, int, int);
template Mat<double> radial_encoding<double>(int, int, int);

// ---------------------------------------------------------------------
// Coefficients / loss

ZernikeCoeffs to_coeffs(const Vec<float>& v) {
    ZernikeCoeffs c;
    for (int i = 0; i < kNumModes && i < v.size(); ++i) c[i] = v(i);
    return c;
}

ZernikeCoeffs to_coeffs(const Vec<double>& v) {
    ZernikeCoeffs c;
    for (int i = 0; i < kNumModes && i < v.size(); ++i) c[i] = v(i);
    return c;
}

double loss_mse(const ZernikeCoeffs& pred, const ZernikeCoeffs& truth) {
    double s = 0.0;
    for (int i = 0; i < kNumModes; ++i) {
        const double d = pred[i] - truth[i];
        s += d * d;
    }
    return s / kNumModes;
}

// ---------------------------------------------------------------------
// Optimizer / schedule / training

template <class S>
AdamW<S>::AdamW(Model<S>& model, const TrainConfig& cfg) : model_(&model), cfg_(cfg) {
    for (const auto& t : model.tensors()) {
        m_.emplace_back(static_cast<std::size_t>(t.size), S(0));
        v_.emplace_back(static_cast<std::size_t>(t.size), S(0));
    }
}

template <class S>
void AdamW<S>::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto tensors = model_->tensors();
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        auto& t = tensors[ti];
        auto& m = m_[ti];
        auto& v = v_[ti];
        double w_norm2 = 0.0, u_norm2 = 0.0;
        std::vector<double> update;
        if (cfg_.use_lamb) update.resize(static_cast<std::size_t>(t.size));
        for (long long i = 0; i < t.size; ++i) {
            const double g = static_cast<double>(t.grad[i]);
            m[static_cast<std::size_t>(i)] = static_cast<S>(
                cfg_.beta1 * m[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta1) * g);
            v[static_cast<std::size_t>(i)] =
                static_cast<S>(cfg_.beta2 * v[static_cast<std::size_t>(i)] +
                               (1.0 - cfg_.beta2) * g * g);
            const double mhat = m[static_cast<std::size_t>(i)] / bc1;
            const double vhat = v[static_cast<std::size_t>(i)] / bc2;
            const double u = mhat / (std::sqrt(vhat) + 1e-8) +
                             cfg_.weight_decay * static_cast<double>(t.data[i]);
            if (cfg_.use_lamb) {
                update[static_cast<std::size_t>(i)] = u;
                w_norm2 += static_cast<double>(t.data[i]) * t.data[i];
                u_norm2 += u * u;
            } else {
                t.data[i] = static_cast<S>(t.data[i] - lr * u);
            }
        }
        if (cfg_.use_lamb) {
            double trust = 1.0;
            if (w_norm2 > 0.0 && u_norm2 > 0.0)
                trust = std::min(std::sqrt(w_norm2) / std::sqrt(u_norm2), 10.0);
            for (long long i = 0; i < t.size; ++i)
                t.data[i] = static_cast<S>(
                    t.data[i] - lr * trust * update[static_cast<std::size_t>(i)]);
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

double lr_schedule(long long step, long long total_steps, long long warmup_steps,
                   double peak_lr) {
    if (warmup_steps > 0 && step < warmup_steps)
        return peak_lr * static_cast<double>(step + 1) /
               static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return peak_lr;
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return peak_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
}

TrainHistory train(Model<float>& model, AdamW<float>& opt,
                   const std::vector<TrainSample>& dataset, const TrainConfig& cfg,
                   long long start_step) {
    if (dataset.empty()) throw std::invalid_argument("empty training dataset");
    TrainHistory history;
    const long long steps_per_epoch =
        (static_cast<long long>(dataset.size()) + cfg.batch - 1) / cfg.batch;
    const long long total_steps =
        cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch * cfg.epochs;
    const long long stop_step =
        cfg.stop_step > 0 ? std::min<long long>(cfg.stop_step, total_steps)
                          : total_steps;
    const long long warmup_steps = static_cast<long long>(
        std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch)));

    long long step = start_step;
    const long long start_epoch =
        steps_per_epoch > 0 ? start_step / steps_per_epoch : 0;
    for (long long epoch = start_epoch; step < stop_step; ++epoch) {
        // Deterministic shuffle keyed by (seed, epoch).
        std::vector<std::size_t> order(dataset.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        CounterRng shuffle_rng(cfg.seed, fold_stream(0x53485546ULL, epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j =
                static_cast<std::size_t>(shuffle_rng.uniform_int(0, i - 1));
            std::swap(order[i - 1], order[j]);
        }

        double epoch_loss = 0.0;
        long long epoch_batches = 0;
        // Resuming mid-epoch replays the same order and skips ahead.
        const long long skip_batches = step - epoch * steps_per_epoch;
        for (long long b = skip_batches; b < steps_per_epoch && step < stop_step;
             ++b) {
            const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch;
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch));
            if (begin >= end) break;

            model.zero_grad();
            double batch_loss = 0.0;
            std::vector<float> input(static_cast<std::size_t>(model.config().planes) *
                                     model.config().d * model.config().d);
            try {
                for (std::size_t s = begin; s < end; ++s) {
                    const TrainSample& sample = dataset[order[s]];
                    TrainRng rng{cfg.seed, static_cast<std::uint64_t>(step),
                                 static_cast<std::uint64_t>(s - begin), true};
                    for (int pl = 0; pl < model.config().planes; ++pl)
                        for (int i = 0; i < model.config().d * model.config().d; ++i)
                            input[static_cast<std::size_t>(pl) * model.config().d *
                                      model.config().d +
                                  i] = sample.embedding.planes[static_cast<std::size_t>(
                                pl)][static_cast<std::size_t>(i)];
                    Vec<float> pred = model.forward(input, rng);
                    Vec<float> diff(kNumModes);
                    for (int i = 0; i < kNumModes; ++i)
                        diff(i) = pred(i) - static_cast<float>(sample.truth[i]);
                    batch_loss += diff.squaredNorm() / kNumModes;
                    Vec<float> dloss = diff * (2.0f / kNumModes);
                    model.backward(dloss);
                }
            } catch (const std::runtime_error&) {
                // Non-finite activations surfaced mid-batch; the update
                // has not been applied, so the parameters are still good.
                history.diverged = true;
                history.steps = step;
                return history;
            }
            const double n_in_batch = static_cast<double>(end - begin);
            batch_loss /= n_in_batch;
            if (!std::isfinite(batch_loss)) {
                // Parameters are untouched by this batch; abort with the
                // last good state in place.
                history.diverged = true;
                history.steps = step;
                return history;
            }
            // Mean gradient over the batch, fixed accumulation order.
            for (auto& t : model.tensors())
                for (long long i = 0; i < t.size; ++i)
                    t.grad[i] = static_cast<float>(t.grad[i] / n_in_batch);

            const double lr = lr_schedule(step, total_steps, warmup_steps, cfg.peak_lr);
            opt.step(lr);
            ++step;
            history.step_loss.push_back(batch_loss);
            epoch_loss += batch_loss;
            ++epoch_batches;
        }
        if (epoch_batches > 0)
            history.epoch_loss.push_back(epoch_loss /
                                         static_cast<double>(epoch_batches));
    }
    history.steps = step;
    return history;
}

double grad_check(const ModelConfig& cfg_in, std::uint64_t seed, int n_params) {
    ModelConfig cfg = cfg_in;
    cfg.validate();
    Model<double> model(cfg);
    model.init_params(seed);

    CounterRng rng(seed, 0x47434b31ULL);
    const std::size_t in_size = static_cast<std::size_t>(cfg.planes) * cfg.d * cfg.d;
    std::vector<double> input(in_size);
    for (auto& v : input) v = rng.uniform(-1.0, 1.0);
    Vec<double> target(cfg.z_out);
    for (int i = 0; i < cfg.z_out; ++i) target(i) = rng.uniform(-0.1, 0.1);

    // The head starts at zero, which would zero most gradients upstream;
    // randomize it for the check.
    auto tensors = model.tensors();
    for (auto& t : tensors)
        if (t.name == "head.w")
            for (long long i = 0; i < t.size; ++i) t.data[i] = rng.uniform(-0.05, 0.05);

    TrainRng eval;  // dropout disabled: determinism precondition
    auto loss_at = [&]() {
        Vec<double> pred = model.forward(input, eval);
        return (pred - target).squaredNorm() / cfg.z_out;
    };

    model.zero_grad();
    Vec<double> pred = model.forward(input, eval);
    Vec<double> dloss = (pred - target) * (2.0 / cfg.z_out);
    model.backward(dloss);

    long long total = 0;
    for (const auto& t : tensors) total += t.size;

    double max_rel = 0.0;
    const double h = 1e-3;
    for (int s = 0; s < n_params; ++s) {
        const long long flat = static_cast<long long>(
            rng.uniform_int(0, static_cast<std::uint64_t>(total - 1)));
        long long off = flat;
        std::size_t ti = 0;
        while (off >= tensors[ti].size) {
            off -= tensors[ti].size;
            ++ti;
        }
        double* w = &tensors[ti].data[off];
        const double keep = *w;
        *w = keep + h;
        const double lp = loss_at();
        *w = keep - h;
        const double lm = loss_at();
        *w = keep;
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = tensors[ti].grad[off];
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-8});
        max_rel = std::max(max_rel, std::fabs(numeric - analytic) / denom);
    }
    return max_rel;
}

// ---------------------------------------------------------------------
// Checkpoints

void save_checkpoint(Model<float>& model, AdamW<float>& opt, const TrainConfig& tcfg,
                     const std::string& path) {
    auto tensors = model.tensors();
    nlohmann::json index = nlohmann::json::array();
    std::size_t offset = 0;
    auto add_entry = [&](const std::string& name, long long size) {
        index.push_back(
            {{"name", name}, {"dtype", "f32"}, {"size", size}, {"offset", offset}});
        offset += static_cast<std::size_t>(size) * sizeof(float);
    };
    for (const auto& t : tensors) add_entry(t.name, t.size);
    for (const auto& t : tensors) add_entry(t.name + ".adam_m", t.size);
    for (const auto& t : tensors) add_entry(t.name + ".adam_v", t.size);

    nlohmann::json header = {
        {"magic", "AOCKPT1"}, {"version", 1},
        {"model_cfg", model.config()}, {"train_cfg", tcfg},
        {"step", opt.step_count()}, {"tensors", index},
    };
    std::string bytes = header.dump();
    bytes.push_back('\n');
    const std::size_t head = bytes.size();
    bytes.resize(head + offset);
    std::size_t pos = head;
    for (const auto& t : tensors) {
        std::memcpy(bytes.data() + pos, t.data, sizeof(float) * t.size);
        pos += sizeof(float) * t.size;
    }
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        std::memcpy(bytes.data() + pos, opt.moments_m()[ti].data(),
                    sizeof(float) * tensors[ti].size);
        pos += sizeof(float) * tensors[ti].size;
    }
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        std::memcpy(bytes.data() + pos, opt.moments_v()[ti].data(),
                    sizeof(float) * tensors[ti].size);
        pos += sizeof(float) * tensors[ti].size;
    }
    atomic_write_file(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing checkpoint header");
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("magic", "") != "AOCKPT1")
        throw std::runtime_error("not an AOCKPT1 checkpoint: " + path);
    if (header.value("version", 0) != 1)
        throw std::runtime_error("unsupported checkpoint version in " + path);

    Checkpoint ckpt;
    ckpt.model_cfg = header.at("model_cfg").get<ModelConfig>();
    ckpt.train_cfg = header.at("train_cfg").get<TrainConfig>();
    ckpt.step = header.value("step", 0LL);
    ckpt.model = std::make_unique<Model<float>>(ckpt.model_cfg);
    ckpt.opt = std::make_unique<AdamW<float>>(*ckpt.model, ckpt.train_cfg);
    ckpt.opt->set_step_count(ckpt.step);

    const std::string blob((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    auto tensors = ckpt.model->tensors();
    std::map<std::string, std::pair<std::size_t, long long>> lookup;
    for (const auto& e : header.at("tensors"))
        lookup[e.at("name").get<std::string>()] = {e.at("offset").get<std::size_t>(),
                                                   e.at("size").get<long long>()};

    auto read_into = [&](const std::string& name, float* dst, long long size) {
        auto it = lookup.find(name);
        if (it == lookup.end())
            throw std::runtime_error("checkpoint missing tensor: " + name);
        if (it->second.second != size)
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        if (it->second.first + sizeof(float) * size > blob.size())
            throw std::runtime_error("checkpoint payload truncated at " + name);
        std::memcpy(dst, blob.data() + it->second.first, sizeof(float) * size);
    };
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        read_into(tensors[ti].name, tensors[ti].data, tensors[ti].size);
        read_into(tensors[ti].name + ".adam_m", ckpt.opt->moments_m()[ti].data(),
                  tensors[ti].size);
        read_into(tensors[ti].name + ".adam_v", ckpt.opt->moments_v()[ti].data(),
                  tensors[ti].size);
    }
    return ckpt;
}

}  // namespace aosense
