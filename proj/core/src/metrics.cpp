// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "seqlidar/autograd.hpp"
#include "seqlidar/errors.hpp"
#include "seqlidar/ops.hpp"

namespace seqlidar {

namespace o = ops;

Tensor<double> bev_histogram(const PointCloud& cloud, const BevConfig& cfg) {
  if (cfg.grid == 0 || !(cfg.radius > 0.0)) throw ConfigError("bev_histogram: grid and radius must be positive");
  const std::size_t G = cfg.grid;
  const double R = cfg.radius, cell = 2.0 * R / static_cast<double>(G);
  Tensor<double> h({G, G});
  std::size_t n = 0;
  for (const auto& p : cloud) {
    if (!(std::abs(p.x) < R && std::abs(p.y) < R)) continue;
    const auto i = std::min(G - 1, static_cast<std::size_t>((p.x + R) / cell));
    const auto j = std::min(G - 1, static_cast<std::size_t>((p.y + R) / cell));
    h[i * G + j] += 1.0;
    ++n;
  }
  if (n > 0) {
    for (auto& v : h.data()) v /= static_cast<double>(n);
  }
  return h;
}

namespace {

void require_same_size(std::span<const Tensor<double>> a, std::span<const Tensor<double>> b, const char* what) {
  const std::size_t n = a.front().numel();
  for (auto set : {a, b}) {
    for (const auto& h : set) {
      if (h.numel() != n) throw DimensionError(std::string(what) + ": histograms differ in size");
    }
  }
}

double sq_dist(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

double mmd(std::span<const Tensor<double>> a, std::span<const Tensor<double>> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw EstimatorError("mmd: the unbiased estimator needs at least 2 histograms per set, got " +
                         std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  require_same_size(a, b, "mmd");
  std::vector<const Tensor<double>*> pool;
  for (const auto& h : a) pool.push_back(&h);
  for (const auto& h : b) pool.push_back(&h);
  const std::size_t n = pool.size(), na = a.size(), nb = b.size();
  std::vector<double> d2(n * n, 0.0);
  std::vector<double> dists;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      d2[i * n + j] = d2[j * n + i] = sq_dist(*pool[i], *pool[j]);
      dists.push_back(std::sqrt(d2[i * n + j]));
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  double gamma = m % 2 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
  if (gamma == 0.0) {
    // More than half the pairs coincide; fall back to the median nonzero distance.
    const auto nz = std::upper_bound(dists.begin(), dists.end(), 0.0);
    if (nz == dists.end()) return 0.0;
    gamma = *(nz + (dists.end() - nz) / 2);
  }
  const double inv = 1.0 / (2.0 * gamma * gamma);
  auto k = [&](std::size_t i, std::size_t j) { return std::exp(-d2[i * n + j] * inv); };
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < na; ++j)
      if (i != j) xx += k(i, j);
  for (std::size_t i = na; i < n; ++i)
    for (std::size_t j = na; j < n; ++j)
      if (i != j) yy += k(i, j);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = na; j < n; ++j) xy += k(i, j);
  const double est = xx / double(na * (na - 1)) + yy / double(nb * (nb - 1)) - 2.0 * xy / double(na * nb);
  return std::max(0.0, est);
}

double jsd(std::span<const Tensor<double>> a, std::span<const Tensor<double>> b) {
  if (a.empty() || b.empty()) throw EstimatorError("jsd: both sets must be nonempty");
  require_same_size(a, b, "jsd");
  auto mean_of = [](std::span<const Tensor<double>> set, const char* name) {
    std::vector<double> m(set.front().numel(), 0.0);
    for (const auto& h : set)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += h[i];
    double total = 0.0;
    for (double v : m) total += v;
    if (!(total > 0.0)) throw EvaluationError(std::string("jsd: mean histogram of set ") + name + " is all zero");
    for (auto& v : m) v /= total;
    return m;
  };
  const auto p = mean_of(a, "A"), q = mean_of(b, "B");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double mid = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) s += 0.5 * p[i] * std::log2(p[i] / mid);
    if (q[i] > 0.0) s += 0.5 * q[i] * std::log2(q[i] / mid);
  }
  return std::clamp(s, 0.0, 1.0);
}

Moments moments(const std::vector<std::vector<double>>& feats) {
  if (feats.size() < 2) throw EstimatorError("frechet: need at least 2 samples per set, got " + std::to_string(feats.size()));
  const std::size_t D = feats.front().size(), N = feats.size();
  for (const auto& f : feats) {
    if (f.size() != D) throw DimensionError("frechet: feature vectors differ in length");
  }
  Moments m{D, std::vector<double>(D, 0.0), std::vector<double>(D * D, 0.0)};
  for (const auto& f : feats)
    for (std::size_t i = 0; i < D; ++i) m.mean[i] += f[i];
  for (auto& v : m.mean) v /= static_cast<double>(N);
  for (const auto& f : feats) {
    for (std::size_t i = 0; i < D; ++i) {
      const double di = f[i] - m.mean[i];
      for (std::size_t j = i; j < D; ++j) m.cov[i * D + j] += di * (f[j] - m.mean[j]);
    }
  }
  for (std::size_t i = 0; i < D; ++i) {
    for (std::size_t j = i; j < D; ++j) {
      m.cov[i * D + j] /= static_cast<double>(N - 1);
      m.cov[j * D + i] = m.cov[i * D + j];
    }
  }
  return m;
}

namespace {

using Mat = Eigen::MatrixXd;

Mat as_matrix(const Moments& m, double ridge) {
  Mat s(m.dim, m.dim);
  for (std::size_t i = 0; i < m.dim; ++i)
    for (std::size_t j = 0; j < m.dim; ++j) s(i, j) = m.cov[i * m.dim + j];
  s = 0.5 * (s + s.transpose());
  s.diagonal().array() += ridge;
  return s;
}

Mat psd_sqrt(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(s);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_from_moments(const Moments& a, const Moments& b, double ridge) {
  if (a.dim != b.dim || a.mean.size() != a.dim || b.mean.size() != b.dim || a.cov.size() != a.dim * a.dim ||
      b.cov.size() != b.dim * b.dim) {
    throw DimensionError("frechet: moment dimensions disagree");
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.dim; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Mat sa = as_matrix(a, ridge), sb = as_matrix(b, ridge);
  const Mat ra = psd_sqrt(sa);
  Mat inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Mat>(inner, Eigen::EigenvaluesOnly).eigenvalues();
  const double cross = ev.cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
}

double frechet(const std::vector<std::vector<double>>& feats_a, const std::vector<std::vector<double>>& feats_b) {
  return frechet_from_moments(moments(feats_a), moments(feats_b));
}

// ---- feature extractor ---------------------------------------------------------

FeatureExtractor::FeatureExtractor(std::uint64_t seed) : seed_(seed) {
  std::mt19937_64 rng(seed);
  auto he = [&](Shape s, std::size_t fan_in) {
    return Tensor<float>::randn(std::move(s), rng, static_cast<float>(std::sqrt(2.0 / static_cast<double>(fan_in))));
  };
  w1_ = he({16, 2, 3, 3}, 18);
  b1_ = Tensor<float>({16});
  w2_ = he({32, 16, 3, 3}, 144);
  b2_ = Tensor<float>({32});
  w3_ = he({64, 32, 3, 3}, 288);
  b3_ = Tensor<float>({64});
  wt_ = he({64, 64, 3, 1, 1}, 192);
  bt_ = Tensor<float>({64});
}

Tensor<float> FeatureExtractor::trunk(std::span<const Tensor<float>> frames) const {
  if (frames.empty()) throw DimensionError("feature extractor: no frames");
  const Shape fs = frames.front().shape();
  if (fs.size() != 3 || fs[0] != 2) throw DimensionError("feature extractor: frames must be [2,H,W], got " + shape_str(fs));
  Tensor<float> batch({frames.size(), fs[0], fs[1], fs[2]});
  const std::size_t per = frames.front().numel();
  for (std::size_t n = 0; n < frames.size(); ++n) {
    if (frames[n].shape() != fs) throw DimensionError("feature extractor: frames differ in shape");
    std::copy(frames[n].data().begin(), frames[n].data().end(), batch.ptr() + n * per);
  }
  NoGradGuard guard;
  using V = Var<float>;
  V h = o::relu(o::conv2d_circular(V(std::move(batch)), V(w1_), V(b1_)));
  h = o::relu(o::conv2d_circular(h, V(w2_), V(b2_), 2));
  h = o::relu(o::conv2d_circular(h, V(w3_), V(b3_), 2));
  return h.value();
}

namespace {

// [mean, std, max] per channel of an [n, C, plane] block, pooled over n and plane.
std::vector<double> pool_channels(const Tensor<float>& x, std::size_t n, std::size_t C, std::size_t plane) {
  std::vector<double> out(3 * C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0, s2 = 0.0, mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      const float* p = x.ptr() + (k * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        s += p[i];
        s2 += double(p[i]) * p[i];
        mx = std::max(mx, double(p[i]));
      }
    }
    const double cnt = static_cast<double>(n * plane), mean = s / cnt;
    out[c] = mean;
    out[C + c] = std::sqrt(std::max(0.0, s2 / cnt - mean * mean));
    out[2 * C + c] = mx;
  }
  return out;
}

}  // namespace

std::vector<double> FeatureExtractor::frame_features(const Tensor<float>& frame) const {
  return frame_features(std::span<const Tensor<float>>(&frame, 1)).front();
}

std::vector<std::vector<double>> FeatureExtractor::frame_features(std::span<const Tensor<float>> frames) const {
  const Tensor<float> maps = trunk(frames);
  const std::size_t C = maps.dim(1), plane = maps.dim(2) * maps.dim(3), per = C * plane;
  std::vector<std::vector<double>> out;
  for (std::size_t n = 0; n < frames.size(); ++n) {
    const Tensor<float> one({1, C, maps.dim(2), maps.dim(3)},
                            std::vector<float>(maps.ptr() + n * per, maps.ptr() + (n + 1) * per));
    out.push_back(pool_channels(one, 1, C, plane));
  }
  return out;
}

std::vector<double> FeatureExtractor::clip_features(std::span<const Tensor<float>> frames) const {
  const Tensor<float> maps = trunk(frames);
  const std::size_t F = maps.dim(0), C = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  NoGradGuard guard;
  using V = Var<float>;
  const V seq(maps.reshaped({1, F, C, h, w}));
  const Tensor<float> mixed = o::relu(o::conv3d_temporal_bf(seq, V(wt_), V(bt_))).value();
  return pool_channels(mixed, F, C, h * w);
}

// ---- reports ------------------------------------------------------------------------

std::string EvalReport::to_table() const {
  std::ostringstream s;
  s << "# NOTE: FRD and FVD use a fixed-seed random convolutional feature extractor (seed " << extractor_seed
    << "),\n# not a pretrained network. Absolute values are not comparable to published tables;\n"
    << "# only orderings and zero-identity are meaningful.\n";
  s << std::left << std::setw(10) << "metric" << "value\n";
  s << std::setprecision(6) << std::fixed;
  s << std::setw(10) << "MMD(e4)" << mmd_e4 << "\n";
  s << std::setw(10) << "JSD" << jsd << "\n";
  s << std::setw(10) << "FRD" << frd << "\n";
  s << std::setw(10) << "FVD" << fvd << "\n";
  s << std::setw(10) << "n_gen" << n_gen << "\n";
  s << std::setw(10) << "n_ref" << n_ref << "\n";
  return s.str();
}

std::string EvalReport::to_kv() const {
  std::ostringstream s;
  s << "# NOTE: FRD/FVD come from a fixed-seed random feature extractor (seed " << extractor_seed
    << "); not comparable to published tables.\n";
  s << std::setprecision(17);
  s << "mmd_e4=" << mmd_e4 << "\njsd=" << jsd << "\nfrd=" << frd << "\nfvd=" << fvd << "\nn_gen=" << n_gen
    << "\nn_ref=" << n_ref << "\nextractor_seed=" << extractor_seed << "\n";
  return s.str();
}

EvalReport EvalReport::from_kv(const std::string& text) {
  EvalReport r;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.starts_with('#')) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "mmd_e4") r.mmd_e4 = std::stod(val);
      else if (key == "jsd") r.jsd = std::stod(val);
      else if (key == "frd") r.frd = std::stod(val);
      else if (key == "fvd") r.fvd = std::stod(val);
      else if (key == "n_gen") r.n_gen = std::stoul(val);
      else if (key == "n_ref") r.n_ref = std::stoul(val);
      else if (key == "extractor_seed") r.extractor_seed = std::stoull(val);
    } catch (const std::logic_error&) {
      throw IngestionError("metrics report: bad value for " + key + ": " + val);
    }
  }
  return r;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream kv(path);
  if (!(kv << report.to_kv())) throw IoError("cannot write " + path.string());
  auto table_path = path;
  table_path.replace_extension(".table.txt");
  std::ofstream t(table_path);
  if (!(t << report.to_table())) throw IoError("cannot write " + table_path.string());
}

// ---- run evaluation ------------------------------------------------------------------

EvalReport evaluate_sets(const std::vector<FrameSequence>& gen, const std::vector<FrameSequence>& ref,
                         const EvalConfig& cfg) {
  if (cfg.clip_frames == 0) throw ConfigError("evaluate: clip_frames must be positive");
  const FeatureExtractor fx(cfg.extractor_seed);
  struct SetStats {
    std::vector<Tensor<double>> hist;
    std::vector<std::vector<double>> frame_feats, clip_feats;
  };
  auto collect = [&](const std::vector<FrameSequence>& set, const char* name) {
    SetStats st;
    for (const auto& seq : set) {
      if (seq.empty()) throw IngestionError(std::string("evaluate: empty sequence in ") + name + " set");
      std::vector<Tensor<float>> chans;
      for (const auto& img : seq) {
        st.hist.push_back(bev_histogram(unproject(img, cfg.sensor), cfg.bev));
        chans.push_back(img.channels);
      }
      for (auto& f : fx.frame_features(chans)) st.frame_feats.push_back(std::move(f));
      const std::size_t clip = std::min(chans.size(), cfg.clip_frames);
      st.clip_feats.push_back(fx.clip_features(std::span<const Tensor<float>>(chans.data(), clip)));
    }
    return st;
  };
  const SetStats g = collect(gen, "generated"), r = collect(ref, "reference");
  EvalReport rep;
  rep.mmd_e4 = kMmdReportScale * mmd(g.hist, r.hist);
  rep.jsd = jsd(g.hist, r.hist);
  rep.frd = frechet(g.frame_feats, r.frame_feats);
  rep.fvd = frechet(g.clip_feats, r.clip_feats);
  rep.n_gen = gen.size();
  rep.n_ref = ref.size();
  rep.extractor_seed = cfg.extractor_seed;
  return rep;
}

std::vector<FrameSequence> read_run_frames(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest = dir / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw IngestionError("missing files: " + manifest.string());
  std::vector<std::string> names;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  std::vector<std::string> missing;
  std::vector<std::size_t> counts;
  for (const auto& n : names) {
    std::size_t k = 0;
    while (fs::exists(dir / n / ("frame_" + std::to_string(k) + ".l4dt"))) {
      if (!fs::exists(dir / n / ("mask_" + std::to_string(k) + ".l4dt")))
        missing.push_back((dir / n / ("mask_" + std::to_string(k) + ".l4dt")).string());
      ++k;
    }
    if (k == 0) missing.push_back((dir / n / "frame_0.l4dt").string());
    counts.push_back(k);
  }
  if (names.empty()) missing.push_back(manifest.string() + " (no entries)");
  if (!missing.empty()) {
    std::string msg = "missing files:";
    for (const auto& m : missing) msg += " " + m;
    throw IngestionError(msg);
  }
  std::vector<FrameSequence> out;
  for (std::size_t s = 0; s < names.size(); ++s) {
    FrameSequence seq;
    for (std::size_t k = 0; k < counts[s]; ++k) {
      const auto idx = std::to_string(k) + ".l4dt";
      seq.push_back(read_image(dir / names[s] / ("frame_" + idx), dir / names[s] / ("mask_" + idx)));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

EvalReport evaluate_run(const std::filesystem::path& gen_dir, const std::filesystem::path& ref_dir,
                        const EvalConfig& cfg) {
  return evaluate_sets(read_run_frames(gen_dir), read_run_frames(ref_dir), cfg);
}

}  // namespace seqlidar
