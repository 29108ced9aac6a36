#pragma once

// Flow matching: linear interpolants x_t = t x + (1 - t) eps with velocity
// target x - eps, logit-normal timestep sampling, Euler decoding of the flow
// ODE, and guided sampling (classifier-free guidance with momentum, norm
// rescaling and parallel-component suppression).
//
// decode() is generic over a velocity model:
//   struct VelocityModel {
//     int image_size() const;
//     ImageT<T> velocity(const ImageT<T>& x_t, double t, Vec2 offset,
//                        const fsq::LatentMessage& msg) const;
//   };

#include "comit/common.hpp"
#include "comit/fsq.hpp"
#include "comit/image.hpp"

#include <vector>

namespace comit::flow {

struct FlowTimeConfig {
    double mu = -1.0;
    double sigma = 1.0;
};

inline double timestep_from_normal(double z, FlowTimeConfig cfg = {}) {
    return sigmoid(cfg.mu + cfg.sigma * z);
}

inline double sample_timestep(Rng& rng, FlowTimeConfig cfg = {}) {
    return timestep_from_normal(rng.normal(), cfg);
}

template <typename T>
struct FlowSample {
    ImageT<T> x;       // clean image
    ImageT<T> eps;     // standard-normal noise
    double t = 0.0;
    ImageT<T> x_t;     // t * x + (1 - t) * eps
    ImageT<T> target;  // x - eps
};

template <typename T>
FlowSample<T> make_flow_sample(const ImageT<T>& x, double t, ImageT<T> eps) {
    require(x.same_shape(eps), "make_flow_sample: shape mismatch");
    require(t >= 0.0 && t <= 1.0, "make_flow_sample: t outside [0,1]");
    FlowSample<T> s;
    s.x = x;
    s.t = t;
    s.x_t.height = x.height;
    s.x_t.width = x.width;
    s.x_t.pix = static_cast<T>(t) * x.pix + static_cast<T>(1.0 - t) * eps.pix;
    s.target.height = x.height;
    s.target.width = x.width;
    s.target.pix = x.pix - eps.pix;
    s.eps = std::move(eps);
    return s;
}

template <typename T>
FlowSample<T> draw_flow_sample(const ImageT<T>& x, Rng& rng, FlowTimeConfig cfg = {}) {
    double t = sample_timestep(rng, cfg);
    return make_flow_sample(x, t, noise_image<T>(x.height, x.width, rng));
}

// mean squared velocity regression error for one image under the given model
template <typename T, typename Model>
double fm_loss(const Model& model, const ImageT<T>& x, const fsq::LatentMessage& message,
               Vec2 global_offset, Rng& rng, FlowTimeConfig cfg = {}) {
    FlowSample<T> s = draw_flow_sample(x, rng, cfg);
    ImageT<T> v = model.velocity(s.x_t, s.t, global_offset, message);
    require(v.same_shape(s.target), "fm_loss: velocity shape mismatch");
    return image_mse(v, s.target);
}

// ---- guided sampling -----------------------------------------------------------

struct GuidanceConfig {
    double weight = 7.5;            // conditional/unconditional mixing strength
    double rescale_threshold = 2.5; // cap on the guidance-difference norm
    double parallel_keep = 0.0;     // fraction of the component parallel to the prediction
    double momentum = -0.5;
    int nfe = 10;

    double step() const { return 1.0 / nfe; }

    void validate() const { require(nfe >= 1, "GuidanceConfig: nfe must be at least 1"); }
};

template <typename T>
struct ApgState {
    Mat<T> momentum;  // same shape as the velocity tensor; starts at zero
};

template <typename T>
Mat<T> apg_velocity(const Mat<T>& v_cond, const Mat<T>& v_uncond, const GuidanceConfig& cfg,
                    ApgState<T>& state) {
    require(v_cond.rows() == v_uncond.rows() && v_cond.cols() == v_uncond.cols(),
            "apg_velocity: shape mismatch");
    if (state.momentum.size() == 0) state.momentum = Mat<T>::Zero(v_cond.rows(), v_cond.cols());

    Mat<T> diff = v_cond - v_uncond;
    Mat<T> d = diff + static_cast<T>(cfg.momentum) * state.momentum;
    state.momentum = diff;

    double norm = d.template cast<double>().norm();
    if (std::isfinite(cfg.rescale_threshold) && norm > cfg.rescale_threshold)
        d *= static_cast<T>(cfg.rescale_threshold / norm);

    double cond_norm = v_cond.template cast<double>().norm();
    Mat<T> parallel;
    if (cond_norm > 0) {
        double coeff = d.cwiseProduct(v_cond).sum() / (cond_norm * cond_norm);
        parallel = v_cond * static_cast<T>(coeff);
    } else {
        parallel = Mat<T>::Zero(d.rows(), d.cols());  // treat d as fully orthogonal
    }
    Mat<T> d_final = static_cast<T>(cfg.parallel_keep) * parallel + (d - parallel);
    return v_cond + static_cast<T>(cfg.weight - 1.0) * d_final;
}

// Euler integration of the flow ODE from pure noise; at guidance weight 1 the
// unconditional branch is skipped entirely. Optionally captures, per step, the
// single-jump completion x_t + (1 - t) v as a preview.
template <typename T, typename Model>
ImageT<T> decode(const Model& model, const fsq::LatentMessage& message, Vec2 global_offset,
                 const GuidanceConfig& cfg, const fsq::LatentMessage& uncond_message, Rng& rng,
                 std::vector<ImageT<T>>* previews = nullptr) {
    cfg.validate();
    const int side = model.image_size();
    ImageT<T> x = noise_image<T>(side, side, rng);
    const double h = cfg.step();
    const bool guided = cfg.weight != 1.0;
    ApgState<T> state;

    for (int i = 0; i < cfg.nfe; ++i) {
        double t = i * h;
        ImageT<T> v = model.velocity(x, t, global_offset, message);
        Mat<T> v_pix = v.pix;
        if (guided) {
            ImageT<T> vu = model.velocity(x, t, Vec2{0.0, 0.0}, uncond_message);
            v_pix = apg_velocity<T>(v.pix, vu.pix, cfg, state);
        }
        if (previews) {
            ImageT<T> jump;
            jump.height = side;
            jump.width = side;
            jump.pix = x.pix + static_cast<T>(1.0 - t) * v_pix;
            previews->push_back(std::move(jump));
        }
        x.pix += static_cast<T>(h) * v_pix;
    }
    return x;
}

}  // namespace comit::flow
