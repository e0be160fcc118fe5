#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "aosense/embedding.hpp"
#include "aosense/zernike.hpp"

namespace aosense {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct StageConfig {
    int patch = 32;   // p; embed dim is p^2, mlp 4 p^2
    int layers = 3;   // n
    int heads = 6;    // h
    double dropout = 0.1;
    double stochastic_depth = 0.1;  // max rate, linear ramp across depth

    int embed_dim() const { return patch * patch; }
    int mlp_dim() const { return 4 * patch * patch; }
    // Per-head width, floor(eps/h); the joint projection spans h*head_dim,
    // which may be slightly under eps (e.g. eps = 1024, h = 6).
    int head_dim() const { return embed_dim() / heads; }
};

struct ModelConfig {
    std::vector<StageConfig> stages{{32, 3, 6}, {16, 3, 6}};
    int d = 64;        // embedding plane side
    int planes = 6;    // l
    int z_out = 15;
    int rpe_m = 16;    // harmonics in the radial positional encoding

    void validate() const;
    // Closed-form trainable-parameter count for this config.
    long long param_count() const;

    static ModelConfig tiny();        // Table-layout T: p=32/16, n=3+3, h=6
    static ModelConfig small_();      // S: n=4+4, h=8
    static ModelConfig probe();       // overfit probe: n=1+1, h=2
};

struct TrainConfig {
    int batch = 16;
    int epochs = 10;
    double warmup_epochs = 1.0;
    double peak_lr = 1e-3;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    bool use_lamb = false;  // layerwise trust-ratio scaling, optional at desk scale
    std::uint64_t seed = 0;
    int max_steps = 0;  // 0 = run all epochs; otherwise schedule over N steps
    int stop_step = 0;  // 0 = none; pause training at this step (resume later)
};

// Patchify / merge. Row-major non-overlapping tiles per plane, each
// flattened; merge is the exact inverse.
//   input planes: l x d x d (vector of plane matrices d*d)
//   tokens: (l*k) x p^2, k = (d/p)^2
template <class S>
Mat<S> patchify(const std::vector<Mat<S>>& planes, int patch);
template <class S>
std::vector<Mat<S>> merge_patches(const Mat<S>& tokens, int planes, int d, int patch);

// RPE table: one row per patch of a plane, [r, sin t, cos t, ..., sin mt,
// cos mt], r normalized to [0, 1] over the tiling.
template <class S>
Mat<S> radial_encoding(int patch, int d, int m);

// One transformer layer, post-norm as written: z1 = LN(MHA(z)) + z,
// z2 = LN(MLP(z1)) + z1. Holds parameters, gradients and the forward
// cache for the backward pass.
template <class S>
struct TransformerLayer;

template <class S>
struct StageModule;

struct TrainRng {
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t sample = 0;
    bool active = false;  // dropout / stochastic depth only when training
};

// The multistage regressor. Scalar-templated so the gradient check can
// run in double while training runs in float.
template <class S>
class Model {
public:
    explicit Model(const ModelConfig& cfg);
    ~Model();

    // Deterministic initialization; head weights start at zero so the
    // initial prediction is the zero wavefront.
    void init_params(std::uint64_t seed);

    // Forward pass for one sample. Input is l*d*d row-major.
    Vec<S> forward(const std::vector<S>& input, const TrainRng& rng);
    Vec<S> forward(const FourierEmbedding& e);  // eval mode

    // Backward for the most recent forward; accumulates into gradients.
    void backward(const Vec<S>& dloss_dout);

    void zero_grad();

    // Flat views over parameters/grads for the optimizer, checkpoints
    // and the finite-difference check. Stable order.
    struct TensorRef {
        std::string name;
        S* data;
        S* grad;
        long long size;
    };
    std::vector<TensorRef> tensors();

    const ModelConfig& config() const { return cfg_; }
    long long param_count();

private:
    ModelConfig cfg_;
    std::vector<std::unique_ptr<StageModule<S>>> stages_;
    Mat<S> head_w_;  // z_out x (l * k_last)
    Vec<S> head_b_;
    Mat<S> head_gw_;
    Vec<S> head_gb_;
    // caches
    std::vector<S> input_;
    Vec<S> pooled_;
};

ZernikeCoeffs to_coeffs(const Vec<float>& v);
ZernikeCoeffs to_coeffs(const Vec<double>& v);

double loss_mse(const ZernikeCoeffs& pred, const ZernikeCoeffs& truth);

// AdamW with decoupled weight decay; optional LAMB trust ratio.
template <class S>
class AdamW {
public:
    AdamW(Model<S>& model, const TrainConfig& cfg);
    void step(double lr);
    // Moment access for checkpointing.
    std::vector<std::vector<S>>& moments_m() { return m_; }
    std::vector<std::vector<S>>& moments_v() { return v_; }
    long long step_count() const { return t_; }
    void set_step_count(long long t) { t_ = t; }

private:
    Model<S>* model_;
    TrainConfig cfg_;
    std::vector<std::vector<S>> m_, v_;
    long long t_ = 0;
};

// lr(step): linear warmup to the peak, cosine decay to zero.
double lr_schedule(long long step, long long total_steps, long long warmup_steps,
                   double peak_lr);

struct TrainSample {
    FourierEmbedding embedding;
    ZernikeCoeffs truth;
};

struct TrainHistory {
    std::vector<double> epoch_loss;
    std::vector<double> step_loss;
    bool diverged = false;
    long long steps = 0;
};

// Deterministic training loop (fixed batch order per seed/epoch, fixed
// reduction order across the batch). Divergence aborts with the last
// good parameters retained in `model`.
TrainHistory train(Model<float>& model, AdamW<float>& opt,
                   const std::vector<TrainSample>& dataset, const TrainConfig& cfg,
                   long long start_step = 0);

// Max relative error between analytic and central finite-difference
// gradients over >= n_samples randomly chosen parameters (double
// precision, dropout disabled).
double grad_check(const ModelConfig& cfg, std::uint64_t seed, int n_params = 200);

// Checkpoint: JSON header line {magic, version, model_cfg, train_cfg
// echo, step, tensors:[{name,dtype,shape-free size,offset}]} + f32 blob.
void save_checkpoint(Model<float>& model, AdamW<float>& opt, const TrainConfig& tcfg,
                     const std::string& path);
struct Checkpoint {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    long long step = 0;
    std::unique_ptr<Model<float>> model;
    std::unique_ptr<AdamW<float>> opt;
};
Checkpoint load_checkpoint(const std::string& path);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace aosense
