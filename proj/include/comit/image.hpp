#pragma once

// Dense RGB image tensor in [-1, 1], stored row-major with interleaved
// channels: pix(r, 3*c + ch). Patchify flattens non-overlapping p x p windows
// to rows of a (num_patches x 3p^2) matrix in raster order.

#include "comit/common.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

namespace comit {

template <typename T>
struct ImageT {
    int height = 0;
    int width = 0;
    Mat<T> pix;  // height x (3 * width)

    static ImageT zeros(int h, int w) { return {h, w, Mat<T>::Zero(h, 3 * w)}; }

    T at(int y, int x, int c) const { return pix(y, 3 * x + c); }
    T& at(int y, int x, int c) { return pix(y, 3 * x + c); }

    bool same_shape(const ImageT& o) const { return height == o.height && width == o.width; }
};

using ImageF = ImageT<float>;
using ImageD = ImageT<double>;

template <typename T, typename U>
ImageT<T> image_cast(const ImageT<U>& src) {
    return {src.height, src.width, src.pix.template cast<T>()};
}

// 8-bit RGB buffer <-> [-1, 1] tensor
template <typename T>
ImageT<T> image_from_u8(const std::vector<uint8_t>& rgb, int h, int w) {
    require(static_cast<size_t>(h) * w * 3 == rgb.size(), "image_from_u8: size mismatch");
    ImageT<T> img = ImageT<T>::zeros(h, w);
    for (int y = 0; y < h; ++y)
        for (int i = 0; i < 3 * w; ++i)
            img.pix(y, i) = static_cast<T>(rgb[static_cast<size_t>(y) * 3 * w + i] / 127.5 - 1.0);
    return img;
}

template <typename T>
std::vector<uint8_t> image_to_u8(const ImageT<T>& img) {
    std::vector<uint8_t> rgb(static_cast<size_t>(img.height) * img.width * 3);
    for (int y = 0; y < img.height; ++y)
        for (int i = 0; i < 3 * img.width; ++i) {
            double v = (static_cast<double>(img.pix(y, i)) + 1.0) * 127.5;
            rgb[static_cast<size_t>(y) * 3 * img.width + i] =
                static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
        }
    return rgb;
}

template <typename T>
Mat<T> patchify(const ImageT<T>& img, int patch) {
    require(patch > 0 && img.height % patch == 0 && img.width % patch == 0,
            "patchify: image extent must be divisible by patch size");
    int gh = img.height / patch, gw = img.width / patch;
    Mat<T> out(gh * gw, 3 * patch * patch);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            Eigen::Index row = py * gw + px;
            for (int y = 0; y < patch; ++y)
                out.row(row).segment(y * 3 * patch, 3 * patch) =
                    img.pix.row(py * patch + y).segment(px * 3 * patch, 3 * patch);
        }
    return out;
}

template <typename T>
ImageT<T> unpatchify(const Mat<T>& patches, int patch, int gh, int gw) {
    require(patches.rows() == gh * gw && patches.cols() == 3 * patch * patch,
            "unpatchify: shape mismatch");
    ImageT<T> img = ImageT<T>::zeros(gh * patch, gw * patch);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            Eigen::Index row = py * gw + px;
            for (int y = 0; y < patch; ++y)
                img.pix.row(py * patch + y).segment(px * 3 * patch, 3 * patch) =
                    patches.row(row).segment(y * 3 * patch, 3 * patch);
        }
    return img;
}

template <typename T>
double image_mse(const ImageT<T>& a, const ImageT<T>& b) {
    require(a.same_shape(b), "image_mse: shape mismatch");
    return (a.pix - b.pix).template cast<double>().array().square().mean();
}

// PSNR on the [0, 1] scale after clamping; inputs live in [-1, 1]
template <typename T>
double image_psnr(const ImageT<T>& pred, const ImageT<T>& ref) {
    require(pred.same_shape(ref), "image_psnr: shape mismatch");
    double mse = 0.0;
    for (Eigen::Index y = 0; y < pred.pix.rows(); ++y)
        for (Eigen::Index i = 0; i < pred.pix.cols(); ++i) {
            double p = std::clamp((static_cast<double>(pred.pix(y, i)) + 1.0) / 2.0, 0.0, 1.0);
            double r = std::clamp((static_cast<double>(ref.pix(y, i)) + 1.0) / 2.0, 0.0, 1.0);
            mse += (p - r) * (p - r);
        }
    mse /= static_cast<double>(pred.pix.size());
    if (mse <= 0.0) return 99.0;  // identical images; cap instead of infinity
    return -10.0 * std::log10(mse);
}

// image filled with i.i.d. standard normal entries
template <typename T>
ImageT<T> noise_image(int h, int w, Rng& rng) {
    ImageT<T> img = ImageT<T>::zeros(h, w);
    for (int y = 0; y < h; ++y)
        for (int i = 0; i < 3 * w; ++i) img.pix(y, i) = static_cast<T>(rng.normal());
    return img;
}

}  // namespace comit
