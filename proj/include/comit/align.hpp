#pragma once

// Representation alignment against a frozen teacher. Two losses share the
// projector heads:
//   - semantic: exp(-cos(teacher_global, mean over message slots of the
//     projected tap features)), range [e^-1, e]
//   - spatial: mean over patches of -cos(projected patch feature, teacher
//     patch feature), range [-1, 1]
// Teachers are pluggable: a deterministic synthetic oracle derived from scene
// metadata, or features preloaded from disk.

#include "comit/common.hpp"
#include "comit/datagen.hpp"
#include "comit/graph.hpp"
#include "comit/serialize.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace comit::align {

using nlohmann::json;

struct TeacherFeatures {
    MatD global_vec;  // 1 x s
    MatD spatial;     // P x s, aligned to the model patch grid
};

// ---- core loss formulas (tape ops) --------------------------------------------

template <typename T>
typename Graph<T>::Var exp_neg_cosine(Graph<T>& g, typename Graph<T>::Var pooled,
                                      const Mat<T>& teacher_global) {
    return g.exp_(g.neg(g.cosine_vec(pooled, g.constant(teacher_global))));
}

template <typename T>
typename Graph<T>::Var neg_mean_cosine_rows(Graph<T>& g, typename Graph<T>::Var student,
                                            const Mat<T>& teacher_spatial) {
    require(g.val(student).rows() == teacher_spatial.rows(),
            "alignment: patch grid mismatch between student and teacher");
    return g.neg(g.mean_all(g.cosine_rows(student, g.constant(teacher_spatial))));
}

// ---- projector heads ------------------------------------------------------------

struct AlignmentConfig {
    int hidden = 128;        // backbone width feeding the projectors
    int projector_hidden = 128;
    int teacher_dim = 64;
    int layers = 3;
    double lambda_repa = 0.5;
    double lambda_srepa = 0.5;

    void validate() const {
        require(layers == 3, "AlignmentConfig: projector is a fixed 3-layer perceptron");
        require(lambda_repa >= 0 && lambda_srepa >= 0, "AlignmentConfig: negative loss weight");
    }
};

inline void to_json(json& j, const AlignmentConfig& c) {
    j = json{{"hidden", c.hidden},
             {"projector_hidden", c.projector_hidden},
             {"teacher_dim", c.teacher_dim},
             {"layers", c.layers},
             {"lambda_repa", c.lambda_repa},
             {"lambda_srepa", c.lambda_srepa}};
}

inline void from_json(const json& j, AlignmentConfig& c) {
    j.at("hidden").get_to(c.hidden);
    j.at("projector_hidden").get_to(c.projector_hidden);
    j.at("teacher_dim").get_to(c.teacher_dim);
    j.at("layers").get_to(c.layers);
    j.at("lambda_repa").get_to(c.lambda_repa);
    j.at("lambda_srepa").get_to(c.lambda_srepa);
}

template <typename T>
class AlignmentHeads {
public:
    explicit AlignmentHeads(AlignmentConfig cfg, uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "align-init"));
        auto dense = [&](const std::string& name, int r, int c) {
            Mat<T> w(r, c);
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                for (Eigen::Index jj = 0; jj < w.cols(); ++jj)
                    w(i, jj) = static_cast<T>(0.02 * rng.normal());
            return store_.add(name, std::move(w));
        };
        auto zeros = [&](const std::string& name, int r, int c) {
            return store_.add(name, Mat<T>::Zero(r, c));
        };
        for (int head = 0; head < 2; ++head) {
            std::string p = head == 0 ? "srepa." : "repa.";
            Head& h = head == 0 ? srepa_ : repa_;
            h.w1 = dense(p + "w1", cfg_.hidden, cfg_.projector_hidden);
            h.b1 = zeros(p + "b1", 1, cfg_.projector_hidden);
            h.w2 = dense(p + "w2", cfg_.projector_hidden, cfg_.projector_hidden);
            h.b2 = zeros(p + "b2", 1, cfg_.projector_hidden);
            h.w3 = dense(p + "w3", cfg_.projector_hidden, cfg_.teacher_dim);
            h.b3 = zeros(p + "b3", 1, cfg_.teacher_dim);
        }
    }

    const AlignmentConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    typename Graph<T>::Var project_semantic(Graph<T>& g, typename Graph<T>::Var x) const {
        return project(g, srepa_, x);
    }
    typename Graph<T>::Var project_spatial(Graph<T>& g, typename Graph<T>::Var x) const {
        return project(g, repa_, x);
    }

private:
    struct Head {
        int w1, b1, w2, b2, w3, b3;
    };

    AlignmentConfig cfg_;
    mutable ParamStore<T> store_;
    Head srepa_{}, repa_{};

    typename Graph<T>::Var project(Graph<T>& g, const Head& h, typename Graph<T>::Var x) const {
        auto a = g.silu(g.add_rowvec(g.matmul(x, g.param(store_, h.w1)), g.param(store_, h.b1)));
        auto b = g.silu(g.add_rowvec(g.matmul(a, g.param(store_, h.w2)), g.param(store_, h.b2)));
        return g.add_rowvec(g.matmul(b, g.param(store_, h.w3)), g.param(store_, h.b3));
    }
};

// semantic alignment on the message-slot tap of a decoding pass
template <typename T>
typename Graph<T>::Var srepa_loss(Graph<T>& g, const AlignmentHeads<T>& heads,
                                  typename Graph<T>::Var tap_message,
                                  const MatD& teacher_global) {
    auto pooled = g.mean_rows(heads.project_semantic(g, tap_message));
    return exp_neg_cosine(g, pooled, Mat<T>(teacher_global.template cast<T>()));
}

// spatial alignment on the image-patch tap of a decoding pass
template <typename T>
typename Graph<T>::Var repa_loss(Graph<T>& g, const AlignmentHeads<T>& heads,
                                 typename Graph<T>::Var tap_image, const MatD& teacher_spatial) {
    auto projected = heads.project_spatial(g, tap_image);
    return neg_mean_cosine_rows(g, projected, Mat<T>(teacher_spatial.template cast<T>()));
}

// ---- teachers -------------------------------------------------------------------

// Deterministic synthetic teacher: the global vector sums fixed random
// embeddings of the present (category, color) attributes; the spatial grid
// carries the embedding of the object covering each patch.
class OracleTeacher {
public:
    OracleTeacher(int teacher_dim, int grid_side, int canvas, uint64_t seed)
        : dim_(teacher_dim), grid_(grid_side), canvas_(canvas) {
        require(canvas % grid_side == 0, "OracleTeacher: grid must divide the canvas");
        Rng rng(derive_seed(seed, "oracle-teacher"));
        cat_emb_ = random_rows(data::kNumCategories, rng);
        col_emb_ = random_rows(data::kNumColors, rng);
        bg_emb_ = random_rows(1, rng);
    }

    int dim() const { return dim_; }
    int grid_side() const { return grid_; }

    TeacherFeatures features(const data::SpriteScene& scene) const {
        TeacherFeatures f;
        f.global_vec = MatD::Zero(1, dim_);
        if (scene.objects.empty()) {
            f.global_vec = bg_emb_;
        } else {
            for (const auto& obj : scene.objects) {
                require(obj.category() >= 0 && obj.category() < data::kNumCategories,
                        "OracleTeacher: unknown category");
                f.global_vec += cat_emb_.row(obj.category()) + col_emb_.row(obj.color);
            }
        }
        normalize_rows(f.global_vec);

        int patch = canvas_ / grid_;
        f.spatial = MatD::Zero(grid_ * grid_, dim_);
        for (int py = 0; py < grid_; ++py)
            for (int px = 0; px < grid_; ++px) {
                Eigen::Index row = py * grid_ + px;
                int best = -1, best_cover = 0;
                for (size_t k = 0; k < scene.objects.size(); ++k) {
                    int cover = patch_cover(scene.objects[k].mask, px * patch, py * patch, patch);
                    if (cover > best_cover) {
                        best_cover = cover;
                        best = static_cast<int>(k);
                    }
                }
                if (best < 0) {
                    f.spatial.row(row) = bg_emb_.row(0);
                } else {
                    const auto& obj = scene.objects[static_cast<size_t>(best)];
                    f.spatial.row(row) = cat_emb_.row(obj.category()) + col_emb_.row(obj.color);
                }
            }
        normalize_rows(f.spatial);
        return f;
    }

private:
    int dim_, grid_, canvas_;
    MatD cat_emb_, col_emb_, bg_emb_;

    MatD random_rows(int n, Rng& rng) const {
        MatD m(n, dim_);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal();
        normalize_rows(m);
        return m;
    }

    static void normalize_rows(MatD& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            double n = m.row(r).norm();
            if (n > 0) m.row(r) /= n;
        }
    }

    int patch_cover(const std::vector<uint8_t>& mask, int x0, int y0, int patch) const {
        int n = 0;
        for (int y = y0; y < y0 + patch; ++y)
            for (int x = x0; x < x0 + patch; ++x)
                n += mask[static_cast<size_t>(y) * canvas_ + x];
        return n;
    }
};

// Teacher backed by precomputed per-image features: a JSON manifest next to a
// tensor archive holding "g:<id>" and "s:<id>" entries.
class FileTeacher {
public:
    FileTeacher(const std::filesystem::path& manifest_path) {
        std::ifstream is(manifest_path);
        if (!is) fail("FileTeacher: cannot read manifest " + manifest_path.string());
        json manifest = json::parse(is);
        dim_ = manifest.at("dim").get<int>();
        grid_ = manifest.at("grid_side").get<int>();
        auto archive_file = manifest_path.parent_path() /
                            manifest.at("archive").get<std::string>();
        serialize::TensorArchive ar = serialize::load_archive(archive_file);
        for (const auto& id : manifest.at("ids")) {
            int key = id.get<int>();
            TeacherFeatures f;
            f.global_vec = ar.get("g:" + std::to_string(key)).cast<double>();
            f.spatial = ar.get("s:" + std::to_string(key)).cast<double>();
            require(f.global_vec.cols() == dim_ && f.spatial.cols() == dim_,
                    "FileTeacher: dimension mismatch in archive");
            features_.emplace(key, std::move(f));
        }
    }

    int dim() const { return dim_; }
    int grid_side() const { return grid_; }

    const TeacherFeatures& features(int image_id) const {
        auto it = features_.find(image_id);
        if (it == features_.end())
            fail("FileTeacher: no features for image " + std::to_string(image_id));
        return it->second;
    }

    static void save(const std::filesystem::path& manifest_path, int dim, int grid_side,
                     const std::map<int, TeacherFeatures>& features) {
        serialize::TensorArchive ar;
        json ids = json::array();
        for (const auto& [id, f] : features) {
            ar.tensors["g:" + std::to_string(id)] = f.global_vec.cast<float>();
            ar.tensors["s:" + std::to_string(id)] = f.spatial.cast<float>();
            ids.push_back(id);
        }
        std::string archive_name = manifest_path.stem().string() + ".bin";
        serialize::save_archive(manifest_path.parent_path() / archive_name, ar);
        json manifest;
        manifest["dim"] = dim;
        manifest["grid_side"] = grid_side;
        manifest["archive"] = archive_name;
        manifest["ids"] = ids;
        std::ofstream os(manifest_path);
        if (!os) fail("FileTeacher: cannot write manifest " + manifest_path.string());
        os << manifest.dump(2) << "\n";
    }

private:
    int dim_ = 0, grid_ = 0;
    std::map<int, TeacherFeatures> features_;
};

}  // namespace comit::align
