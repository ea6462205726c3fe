#pragma once

// Quantitative evaluation: decision accuracies on generated images, the
// Frechet distance on VAE mean vectors, Jensen-Shannon distance between
// kernel density estimates of 2-D PCA projections, localization metrics
// (IoU at a percentile threshold, NCC), and the gradient / integrated
// gradients baseline maps.

#include <map>

#include <Eigen/Dense>

#include "counterfax/embedding.hpp"
#include "counterfax/explainers.hpp"

#include "json.hpp"

namespace counterfax {

using LatentSet = std::vector<std::vector<double>>;

// ---------------------------------------------------------------------------
// Decision accuracies
// ---------------------------------------------------------------------------

/// Fraction of images whose adversarial generation keeps the original
/// decision. Lower is better for an attack.
template <typename T>
double adversarial_accuracy(const LeNetClassifier<T>& classifier, Explainer<T>& explainer,
                            const std::vector<Image>& images, double threshold) {
    if (images.empty()) throw UndefinedError("adversarial_accuracy: empty image list");
    auto orig = predict_prob(classifier, images);
    auto advs = adversary_batch(explainer, images);
    auto gen = predict_prob(classifier, advs);
    int same = 0;
    for (size_t i = 0; i < images.size(); ++i)
        same += decide_prob(orig[i], threshold) == decide_prob(gen[i], threshold);
    return double(same) / double(images.size());
}

/// Fraction of images whose stable generation keeps the original decision.
template <typename T>
double stable_accuracy(const LeNetClassifier<T>& classifier, Explainer<T>& explainer,
                       const std::vector<Image>& images, double threshold) {
    if (images.empty()) throw UndefinedError("stable_accuracy: empty image list");
    auto orig = predict_prob(classifier, images);
    auto stabs = stable_batch(explainer, images);
    auto gen = predict_prob(classifier, stabs);
    int same = 0;
    for (size_t i = 0; i < images.size(); ++i)
        same += decide_prob(orig[i], threshold) == decide_prob(gen[i], threshold);
    return double(same) / double(images.size());
}

// ---------------------------------------------------------------------------
// Frechet distance on latent vectors
// ---------------------------------------------------------------------------

namespace metricdetail {

inline void mean_cov(const LatentSet& set, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
    int n = int(set.size());
    int d = int(set[0].size());
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) X(i, j) = set[size_t(i)][size_t(j)];
    mean = X.colwise().mean();
    Eigen::MatrixXd centered = X.rowwise() - mean.transpose();
    cov = centered.transpose() * centered / double(n - 1);
}

/// Symmetric PSD square root with clamping of slightly negative eigenvalues.
inline Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m, double clamp_tol, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) {
        if (ev(i) < -clamp_tol)
            throw NumericError(std::string(what) + ": eigenvalue " + std::to_string(ev(i)) +
                               " below clamp tolerance -" + std::to_string(clamp_tol));
        ev(i) = ev(i) > 0 ? std::sqrt(ev(i)) : 0.0;
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace metricdetail

/// Wasserstein-2 distance between Gaussian fits of two latent sets:
/// |m_a - m_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2}).
inline double frechet_distance(const LatentSet& a, const LatentSet& b) {
    if (a.empty() || b.empty()) throw UndefinedError("frechet_distance: empty set");
    int d = int(a[0].size());
    if (int(a.size()) < d + 1 || int(b.size()) < d + 1)
        throw ConfigError("frechet_distance: need at least latent_dim + 1 vectors per set");

    Eigen::VectorXd ma, mb;
    Eigen::MatrixXd ca, cb;
    metricdetail::mean_cov(a, ma, ca);
    metricdetail::mean_cov(b, mb, cb);

    // tr((Ca Cb)^{1/2}) computed through the symmetrized product
    // sqrt(Ca) Cb sqrt(Ca), which is PSD up to rounding.
    Eigen::MatrixXd sa = metricdetail::sqrtm_psd(ca, 1e-8, "frechet_distance: covariance");
    Eigen::MatrixXd inner = sa * cb * sa;
    inner = 0.5 * (inner + inner.transpose().eval());
    Eigen::MatrixXd s = metricdetail::sqrtm_psd(inner, 1e-8, "frechet_distance: product");

    double dist = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * s.trace();
    return std::max(0.0, dist);
}

// ---------------------------------------------------------------------------
// PCA projection and Jensen-Shannon distance on KDE grids
// ---------------------------------------------------------------------------

using Point2 = std::array<double, 2>;

/// Fit a centered 2-component PCA basis on the reference set and project the
/// query set into it.
inline std::vector<Point2> pca_project_2d(const LatentSet& reference, const LatentSet& queries) {
    if (reference.size() < 3) throw ConfigError("pca_project_2d: reference set too small");
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    metricdetail::mean_cov(reference, mean, cov);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    int d = int(cov.rows());
    if (d < 2 || es.eigenvalues()(d - 2) <= 1e-12)
        throw NumericError("pca_project_2d: reference spans fewer than 2 dimensions");
    Eigen::VectorXd v1 = es.eigenvectors().col(d - 1);
    Eigen::VectorXd v2 = es.eigenvectors().col(d - 2);
    // Deterministic sign: largest-magnitude component positive.
    auto fix_sign = [](Eigen::VectorXd& v) {
        int arg = 0;
        for (int i = 1; i < v.size(); ++i)
            if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
        if (v(arg) < 0) v = -v;
    };
    fix_sign(v1);
    fix_sign(v2);

    std::vector<Point2> out(queries.size());
    for (size_t i = 0; i < queries.size(); ++i) {
        Eigen::VectorXd q(d);
        for (int j = 0; j < d; ++j) q(j) = queries[i][size_t(j)] - mean(j);
        out[i] = {q.dot(v1), q.dot(v2)};
    }
    return out;
}

struct JsGridConfig {
    int grid_size = 200;
    double pad_bandwidths = 3.0;
};

namespace metricdetail {

struct Kde2d {
    double hx = 0, hy = 0;  // Scott's rule per dimension
};

inline Kde2d scott_bandwidth(const std::vector<Point2>& pts) {
    double n = double(pts.size());
    double mx = 0, my = 0;
    for (const auto& p : pts) {
        mx += p[0];
        my += p[1];
    }
    mx /= n;
    my /= n;
    double vx = 0, vy = 0;
    for (const auto& p : pts) {
        vx += (p[0] - mx) * (p[0] - mx);
        vy += (p[1] - my) * (p[1] - my);
    }
    vx /= std::max(1.0, n - 1);
    vy /= std::max(1.0, n - 1);
    double factor = std::pow(n, -1.0 / 6.0);  // d = 2
    Kde2d k;
    k.hx = std::max(std::sqrt(vx) * factor, 1e-9);
    k.hy = std::max(std::sqrt(vy) * factor, 1e-9);
    return k;
}

/// Separable Gaussian KDE evaluated on a regular grid, as a kernel-matrix
/// product: density(i,j) = sum_p kx(p,i) * ky(p,j).
inline Eigen::MatrixXd kde_grid(const std::vector<Point2>& pts, const Kde2d& bw,
                                const std::vector<double>& gx, const std::vector<double>& gy) {
    int n = int(pts.size()), nx = int(gx.size()), ny = int(gy.size());
    Eigen::MatrixXd kx(n, nx), ky(n, ny);
    for (int p = 0; p < n; ++p) {
        for (int i = 0; i < nx; ++i) {
            double u = (gx[size_t(i)] - pts[size_t(p)][0]) / bw.hx;
            kx(p, i) = std::exp(-0.5 * u * u);
        }
        for (int j = 0; j < ny; ++j) {
            double u = (gy[size_t(j)] - pts[size_t(p)][1]) / bw.hy;
            ky(p, j) = std::exp(-0.5 * u * u);
        }
    }
    return kx.transpose() * ky;  // (nx, ny), unnormalized
}

}  // namespace metricdetail

/// sqrt(JS divergence, base-2 logs) between Gaussian KDEs of two 2-D point
/// sets, both evaluated on one shared grid over the padded union bounding
/// box and renormalized to sum 1. Result lies in [0, 1].
inline double js_distance(const std::vector<Point2>& a, const std::vector<Point2>& b,
                          const JsGridConfig& grid = {}) {
    if (a.size() < 3 || b.size() < 3)
        throw UndefinedError("js_distance: need at least 3 points per set");

    auto bwa = metricdetail::scott_bandwidth(a);
    auto bwb = metricdetail::scott_bandwidth(b);
    double pad_x = grid.pad_bandwidths * std::max(bwa.hx, bwb.hx);
    double pad_y = grid.pad_bandwidths * std::max(bwa.hy, bwb.hy);

    double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
    for (const auto* set : {&a, &b})
        for (const auto& p : *set) {
            lo_x = std::min(lo_x, p[0]);
            hi_x = std::max(hi_x, p[0]);
            lo_y = std::min(lo_y, p[1]);
            hi_y = std::max(hi_y, p[1]);
        }
    lo_x -= pad_x;
    hi_x += pad_x;
    lo_y -= pad_y;
    hi_y += pad_y;

    int g = grid.grid_size;
    std::vector<double> gx(size_t(g), 0.0), gy(size_t(g), 0.0);
    for (int i = 0; i < g; ++i) {
        gx[size_t(i)] = lo_x + (hi_x - lo_x) * double(i) / double(g - 1);
        gy[size_t(i)] = lo_y + (hi_y - lo_y) * double(i) / double(g - 1);
    }

    Eigen::MatrixXd pa = metricdetail::kde_grid(a, bwa, gx, gy);
    Eigen::MatrixXd pb = metricdetail::kde_grid(b, bwb, gx, gy);
    double sa = pa.sum(), sb = pb.sum();
    if (sa <= 0 || sb <= 0) throw NumericError("js_distance: degenerate density");
    pa /= sa;
    pb /= sb;

    double js = 0;
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) {
            double p = pa(i, j), q = pb(i, j), m = 0.5 * (p + q);
            if (p > 0) js += 0.5 * p * std::log2(p / m);
            if (q > 0) js += 0.5 * q * std::log2(q / m);
        }
    js = std::clamp(js, 0.0, 1.0);
    return std::sqrt(js);
}

// ---------------------------------------------------------------------------
// Localization metrics
// ---------------------------------------------------------------------------

/// Linear-interpolation percentile of a value set (p in (0,100)).
inline double percentile_value(std::vector<float> values, double p) {
    if (values.empty()) throw UndefinedError("percentile_value: empty input");
    if (p <= 0 || p >= 100) throw ConfigError("percentile_value: percentile must be in (0,100)");
    std::sort(values.begin(), values.end());
    double rank = p / 100.0 * double(values.size() - 1);
    size_t lo = size_t(std::floor(rank));
    size_t hi = size_t(std::ceil(rank));
    double frac = rank - double(lo);
    return double(values[lo]) * (1 - frac) + double(values[hi]) * frac;
}

/// IoU between the ground-truth mask and the map binarized at its own p-th
/// percentile; pixels strictly above the threshold are foreground.
inline double iou_at_percentile(const ExplanationMap& map, const std::vector<uint8_t>& gt_mask,
                                double percentile) {
    if (map.values.size() != gt_mask.size())
        throw ShapeError("iou_at_percentile: map and mask shapes differ");
    int64_t gt_area = 0;
    for (uint8_t m : gt_mask) gt_area += m;
    if (gt_area == 0) throw UndefinedError("iou_at_percentile: empty ground-truth mask");

    double thresh = percentile_value(map.values, percentile);
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < map.values.size(); ++i) {
        bool in_bin = double(map.values[i]) > thresh;
        bool in_gt = gt_mask[i] != 0;
        inter += in_bin && in_gt;
        uni += in_bin || in_gt;
    }
    return double(inter) / double(uni);
}

struct NccResult {
    double value = 0;
    bool degenerate = false;
};

/// Pearson correlation between the raw map and the binary mask; 0 with the
/// degenerate flag when either side is constant.
inline NccResult ncc(const ExplanationMap& map, const std::vector<uint8_t>& gt_mask) {
    if (map.values.size() != gt_mask.size()) throw ShapeError("ncc: map and mask shapes differ");
    double n = double(map.values.size());
    double me = 0, mm = 0;
    for (size_t i = 0; i < map.values.size(); ++i) {
        me += map.values[i];
        mm += gt_mask[i];
    }
    me /= n;
    mm /= n;
    double se = 0, sm = 0, cross = 0;
    for (size_t i = 0; i < map.values.size(); ++i) {
        double de = map.values[i] - me, dm = gt_mask[i] - mm;
        se += de * de;
        sm += dm * dm;
        cross += de * dm;
    }
    if (se <= 0 || sm <= 0) return {0.0, true};
    return {cross / std::sqrt(se * sm), false};
}

// ---------------------------------------------------------------------------
// Gradient and integrated-gradients baseline maps
// ---------------------------------------------------------------------------

/// |d f_c(x) / d x| elementwise.
template <typename T>
ExplanationMap gradient_map(const LeNetClassifier<T>& classifier, const Image& x) {
    Tensor<T> xt = images_to_tensor<T>({x});
    xt.set_requires_grad(true);
    Tensor<T> prob = classifier.prob_forward(xt);
    Tensor<T> gx = grad(sum_all(prob), {xt})[0];
    ExplanationMap m;
    m.height = x.height;
    m.width = x.width;
    m.values.resize(x.pixels.size());
    for (size_t i = 0; i < m.values.size(); ++i) m.values[i] = std::abs(float(gx.data()[i]));
    return m;
}

/// Signed integrated-gradients attributions with a midpoint Riemann rule:
/// (x - baseline) * mean_k grad f(baseline + (k+0.5)/steps * (x - baseline)).
template <typename T>
std::vector<double> integrated_gradients_attributions(const LeNetClassifier<T>& classifier,
                                                      const Image& x, const Image& baseline,
                                                      int steps) {
    if (steps < 1) throw ConfigError("integrated_gradients: steps must be >= 1");
    if (x.height != baseline.height || x.width != baseline.width)
        throw ShapeError("integrated_gradients: baseline shape differs");
    size_t hw = x.pixels.size();

    std::vector<double> avg(hw, 0.0);
    int chunk = 32;
    for (int k0 = 0; k0 < steps; k0 += chunk) {
        int ks = std::min(chunk, steps - k0);
        std::vector<T> batch(size_t(ks) * hw);
        for (int k = 0; k < ks; ++k) {
            double alpha = (double(k0 + k) + 0.5) / double(steps);
            for (size_t i = 0; i < hw; ++i)
                batch[size_t(k) * hw + i] =
                    T(baseline.pixels[i] + alpha * (x.pixels[i] - baseline.pixels[i]));
        }
        Tensor<T> xt = Tensor<T>::from({ks, 1, x.height, x.width}, std::move(batch));
        xt.set_requires_grad(true);
        Tensor<T> probs = classifier.prob_forward(xt);
        Tensor<T> gx = grad(sum_all(probs), {xt})[0];
        for (int k = 0; k < ks; ++k)
            for (size_t i = 0; i < hw; ++i) avg[i] += double(gx.data()[size_t(k) * hw + i]);
    }
    for (size_t i = 0; i < hw; ++i)
        avg[i] = (double(x.pixels[i]) - double(baseline.pixels[i])) * avg[i] / double(steps);
    return avg;
}

template <typename T>
ExplanationMap integrated_gradients_map(const LeNetClassifier<T>& classifier, const Image& x,
                                        const Image& baseline, int steps) {
    auto attr = integrated_gradients_attributions(classifier, x, baseline, steps);
    ExplanationMap m;
    m.height = x.height;
    m.width = x.width;
    m.values.resize(attr.size());
    for (size_t i = 0; i < attr.size(); ++i) m.values[i] = float(std::abs(attr[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct DirectionMetrics {
    double fd_adv = 0, js_adv = 0;
    double fd_adv_to_source = 0, js_adv_to_source = 0;
    bool has_stable = false;
    double fd_stable = 0, js_stable = 0;
};

struct MetricReport {
    std::string method, dataset;
    std::string classifier_hash;
    double acc_a = 0;
    bool has_acc_s = false;
    double acc_s = 0;
    DirectionMetrics to1;  // chi0 -> chi1
    DirectionMetrics to0;  // chi1 -> chi0
    bool has_loc = false;
    std::map<double, double> iou;  // percentile -> mean IoU
    double ncc_mean = 0;
};

/// FD/JS of generated sets against real target and source domains, per
/// direction, using the frozen embedding. `real` must be a test-time
/// partition of real images.
template <typename T>
void domain_translation_report(const LeNetClassifier<T>& classifier, Explainer<T>& explainer,
                               const EmbeddingModel<T>& embedding, const DecisionPartition& real,
                               MetricReport& report) {
    (void)classifier;
    if (real.chi0.empty() || real.chi1.empty())
        throw ConfigError("domain_translation_report: both real sides required");

    LatentSet mu_real0 = embed_mu(embedding, real.chi0);
    LatentSet mu_real1 = embed_mu(embedding, real.chi1);
    LatentSet mu_ref = mu_real0;
    mu_ref.insert(mu_ref.end(), mu_real1.begin(), mu_real1.end());
    auto pts_real0 = pca_project_2d(mu_ref, mu_real0);
    auto pts_real1 = pca_project_2d(mu_ref, mu_real1);

    bool method_has_stable = explainer.method == ExplainerMethod::SyCE ||
                             explainer.method == ExplainerMethod::SSyE ||
                             explainer.method == ExplainerMethod::CyCSAE;
    report.has_acc_s = method_has_stable;

    auto run_direction = [&](const std::vector<Image>& source, const LatentSet& mu_src,
                             const LatentSet& mu_tgt, const std::vector<Point2>& pts_src,
                             const std::vector<Point2>& pts_tgt, DirectionMetrics& out) {
        auto advs = adversary_batch(explainer, source);
        LatentSet mu_adv = embed_mu(embedding, advs);
        auto pts_adv = pca_project_2d(mu_ref, mu_adv);
        out.fd_adv = frechet_distance(mu_adv, mu_tgt);
        out.js_adv = js_distance(pts_adv, pts_tgt);
        out.fd_adv_to_source = frechet_distance(mu_adv, mu_src);
        out.js_adv_to_source = js_distance(pts_adv, pts_src);
        if (method_has_stable) {
            auto stabs = stable_batch(explainer, source);
            LatentSet mu_st = embed_mu(embedding, stabs);
            auto pts_st = pca_project_2d(mu_ref, mu_st);
            out.has_stable = true;
            out.fd_stable = frechet_distance(mu_st, mu_src);
            out.js_stable = js_distance(pts_st, pts_src);
        }
    };
    run_direction(real.chi0, mu_real0, mu_real1, pts_real0, pts_real1, report.to1);
    run_direction(real.chi1, mu_real1, mu_real0, pts_real1, pts_real0, report.to0);
}

inline nlohmann::json direction_to_json(const DirectionMetrics& d, bool fd) {
    nlohmann::json j;
    j["adv"] = fd ? d.fd_adv : d.js_adv;
    j["adv_to_source"] = fd ? d.fd_adv_to_source : d.js_adv_to_source;
    if (d.has_stable) j["stable"] = fd ? d.fd_stable : d.js_stable;
    return j;
}

inline nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json j;
    j["method"] = r.method;
    j["dataset"] = r.dataset;
    j["classifier_hash"] = r.classifier_hash;
    j["acc"]["a"] = r.acc_a;
    if (r.has_acc_s) j["acc"]["s"] = r.acc_s;
    j["fd"]["0to1"] = direction_to_json(r.to1, true);
    j["fd"]["1to0"] = direction_to_json(r.to0, true);
    j["js"]["0to1"] = direction_to_json(r.to1, false);
    j["js"]["1to0"] = direction_to_json(r.to0, false);
    if (r.has_loc) {
        nlohmann::json iou;
        for (const auto& [p, v] : r.iou) {
            std::string key = std::to_string(p);
            key.erase(key.find_last_not_of('0') + 1);
            if (!key.empty() && key.back() == '.') key.pop_back();
            iou[key] = v;
        }
        j["loc"]["iou"] = iou;
        j["loc"]["ncc"] = r.ncc_mean;
    }
    return j;
}

}  // namespace counterfax
