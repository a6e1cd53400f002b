#include "ssmlab/sae_probe.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "ssmlab/autodiff.hpp"
#include "ssmlab/rng.hpp"
#include "ssmlab/subspace_analytics.hpp"

namespace ssmlab {

SAEConfig funnel_config(std::size_t d_in) {
  SAEConfig c;
  c.d_in = d_in;
  c.d_hidden = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(d_in * 460.0 / 768.0)));
  c.d_latent = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(d_in * 230.0 / 768.0)));
  return c;
}

namespace {

Var activate(Var v, SaeActivation a) { return a == SaeActivation::kRelu ? relu(v) : v; }

struct SaeVars {
  Var w1, b1, w2, b2, dw, db;
};

Var encode_vars(const SaeVars& p, Var x, SaeActivation a) {
  Var h = activate(matmul(x, p.w1) + p.b1, a);
  return activate(matmul(h, p.w2) + p.b2, a);
}

SaeVars bind(Tape& tape, const SAEWeights& w) {
  return {tape.leaf(w.enc_w1), tape.leaf(w.enc_b1), tape.leaf(w.enc_w2),
          tape.leaf(w.enc_b2), tape.leaf(w.dec_w),  tape.leaf(w.dec_b)};
}

void check_acts(const Tensor& acts, std::size_t d_in, const char* what) {
  if (acts.rank() != 2 || acts.dim(1) != d_in) {
    throw ShapeError(std::string(what) + ": expected N x " + std::to_string(d_in) + " activations, got " +
                     shape_to_string(acts.shape()));
  }
}

Tensor rows(const Tensor& m, std::span<const std::size_t> ids) {
  Tensor out(Shape{ids.size(), m.dim(1)});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = m.row(ids[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

void sae_step(SAEWeights& w, Tensor batch, const SAEConfig& config, std::vector<double>& curve) {
  const double B = static_cast<double>(batch.dim(0));
  Tape tape;
  const SaeVars p = bind(tape, w);
  Var x = tape.constant(std::move(batch));
  Var z = encode_vars(p, x, w.activation);
  Var diff = x - (matmul(z, p.dw) + p.db);
  Var abs_z = w.activation == SaeActivation::kRelu ? z : relu(z) + relu(-z);
  Var loss = scale(sum(diff * diff) + scale(sum(abs_z), config.l1_weight), 1.0 / B);
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw Error("loss diverged");
  curve.push_back(value);
  const std::vector<Var> leaves{p.w1, p.b1, p.w2, p.b2, p.dw, p.db};
  const Gradients g = gradient(tape, loss, leaves);
  Tensor* params[] = {&w.enc_w1, &w.enc_b1, &w.enc_w2, &w.enc_b2, &w.dec_w, &w.dec_b};
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const Tensor& gr = g.at(leaves[i].id());
    auto& data = params[i]->storage();
    for (std::size_t k = 0; k < data.size(); ++k) data[k] -= config.lr * gr[k];
  }
}

}  // namespace

SAEResult train_sae(const Tensor& acts, const SAEConfig& config) {
  if (config.d_in == 0 || config.d_hidden == 0 || config.d_latent == 0) {
    throw Error("train_sae: dimensions must be positive");
  }
  if (config.d_latent > config.d_hidden) throw Error("train_sae: d_latent must not exceed d_hidden");
  if (!(config.l1_weight >= 0.0)) throw Error("train_sae: l1_weight must be >= 0");
  if (config.batch_size == 0) throw Error("train_sae: batch_size must be positive");
  check_acts(acts, config.d_in, "train_sae");
  const std::size_t N = acts.dim(0);
  if (N < 10 * config.d_latent) {
    throw Error("train_sae: need at least 10 * d_latent = " + std::to_string(10 * config.d_latent) +
                " rows, got " + std::to_string(N));
  }
  Rng rng(config.seed);
  SAEResult result;
  SAEWeights& w = result.weights;
  w.activation = config.activation;
  w.enc_w1 = rng.normal_tensor(Shape{config.d_in, config.d_hidden}, 1.0 / std::sqrt(double(config.d_in)));
  w.enc_b1 = Tensor(Shape{config.d_hidden});
  w.enc_w2 = rng.normal_tensor(Shape{config.d_hidden, config.d_latent}, 1.0 / std::sqrt(double(config.d_hidden)));
  w.enc_b2 = Tensor(Shape{config.d_latent});
  w.dec_w = rng.normal_tensor(Shape{config.d_latent, config.d_in}, 1.0 / std::sqrt(double(config.d_latent)));
  w.dec_b = Tensor(Shape{config.d_in});

  const std::size_t B = std::min(config.batch_size, N);
  std::vector<std::size_t> ids(B);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& i : ids) i = rng.index(N);
    try {
      sae_step(w, rows(acts, ids), config, result.loss_curve);
    } catch (const Error& e) {
      throw Error("train_sae: step " + std::to_string(step) + ": " + e.what());
    }
  }
  return result;
}

Tensor sae_encode(const SAEWeights& w, const Tensor& acts) {
  check_acts(acts, w.enc_w1.dim(0), "sae_encode");
  Tape tape;
  tape.set_recording(false);
  const SaeVars p = bind(tape, w);
  return encode_vars(p, tape.constant(acts), w.activation).value();
}

Tensor sae_decode(const SAEWeights& w, const Tensor& latents) {
  check_acts(latents, w.dec_w.dim(0), "sae_decode");
  Tape tape;
  tape.set_recording(false);
  return (matmul(tape.constant(latents), tape.leaf(w.dec_w)) + tape.leaf(w.dec_b)).value();
}

double sae_reconstruction_error(const SAEWeights& w, const Tensor& acts) {
  const Tensor recon = sae_decode(w, sae_encode(w, acts));
  double total = 0.0;
  for (std::size_t i = 0; i < acts.size(); ++i) total += (acts[i] - recon[i]) * (acts[i] - recon[i]);
  return acts.dim(0) == 0 ? 0.0 : total / static_cast<double>(acts.dim(0));
}

SAEMetrics sae_metrics(const Tensor& latents, double reconstruction_error) {
  if (latents.rank() != 2 || latents.size() == 0) {
    throw ShapeError("sae_metrics: expected a non-empty N x d matrix, got " + shape_to_string(latents.shape()));
  }
  const std::size_t N = latents.dim(0);
  const std::size_t d = latents.dim(1);
  SAEMetrics m;
  m.reconstruction_error = reconstruction_error;
  std::size_t zeros = 0;
  for (double v : latents.data()) {
    if (!std::isfinite(v)) throw Error("sae_metrics: non-finite latent");
    zeros += std::abs(v) < 1e-6;
  }
  std::size_t active = 0;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += latents.at(i, j);
    active += mean / static_cast<double>(N) > 0.1;
  }
  m.sparsity_pct = 100.0 * static_cast<double>(zeros) / static_cast<double>(latents.size());
  m.active_features_pct = 100.0 * static_cast<double>(active) / static_cast<double>(d);
  return m;
}

std::vector<double> latent_signal_correlation(const Tensor& latents, std::span<const double> signal) {
  if (latents.rank() != 2 || latents.dim(0) != signal.size()) {
    throw ShapeError("latent_signal_correlation: " + shape_to_string(latents.shape()) + " latents vs " +
                     std::to_string(signal.size()) + " signal values");
  }
  std::vector<double> out;
  std::vector<double> column(latents.dim(0));
  for (std::size_t j = 0; j < latents.dim(1); ++j) {
    for (std::size_t i = 0; i < column.size(); ++i) column[i] = latents.at(i, j);
    out.push_back(pearson(column, signal));
  }
  return out;
}

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_mat(const Tensor& t) {
  return Eigen::Map<const Mat>(t.data().data(), static_cast<Eigen::Index>(t.dim(0)),
                               static_cast<Eigen::Index>(t.dim(1)));
}

Tensor to_tensor(const Mat& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<Mat>(t.storage().data(), m.rows(), m.cols()) = m;
  return t;
}

double soft_threshold(double v, double a) {
  return v > a ? v - a : (v < -a ? v + a : 0.0);
}

// Warm-started coordinate descent on 0.5||x - c D||^2 + alpha ||c||_1 for
// every row; each coordinate step is an exact minimization.
void sparse_code(const Mat& X, const Mat& D, double alpha, std::size_t sweeps, Mat& C) {
  const Mat G = D * D.transpose();
  const Mat XD = X * D.transpose();
  const Eigen::Index k = D.rows();
  Eigen::VectorXd Gc(k);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Gc = G * C.row(i).transpose();
    for (std::size_t sweep = 0; sweep < sweeps; ++sweep) {
      double moved = 0.0;
      for (Eigen::Index j = 0; j < k; ++j) {
        const double old = C(i, j);
        const double rho = XD(i, j) - Gc(j) + G(j, j) * old;
        const double next = soft_threshold(rho, alpha) / G(j, j);
        if (next != old) {
          Gc += (next - old) * G.col(j);
          C(i, j) = next;
          moved = std::max(moved, std::abs(next - old));
        }
      }
      if (moved < 1e-12) break;
    }
  }
}

}  // namespace

DictResult dict_learn(const Tensor& data, const DictConfig& config) {
  if (data.rank() != 2 || data.size() == 0) {
    throw ShapeError("dict_learn: expected a non-empty N x p matrix, got " + shape_to_string(data.shape()));
  }
  if (config.dict_size == 0) throw Error("dict_learn: dict_size must be >= 1");
  if (!(config.alpha >= 0.0)) throw Error("dict_learn: alpha must be >= 0");
  const std::size_t N = data.dim(0);
  if (config.dict_size > N) {
    throw Error("dict_learn: dict_size " + std::to_string(config.dict_size) + " exceeds " + std::to_string(N) +
                " samples");
  }
  const Mat X = to_mat(data);
  const Eigen::Index k = static_cast<Eigen::Index>(config.dict_size);
  const Eigen::Index p = X.cols();
  Rng rng(config.seed);

  auto random_direction = [&] {
    Eigen::RowVectorXd v(p);
    do {
      for (Eigen::Index j = 0; j < p; ++j) v(j) = rng.normal();
    } while (v.norm() == 0.0);
    return Eigen::RowVectorXd(v / v.norm());
  };
  auto random_row = [&]() -> Eigen::RowVectorXd {
    for (std::size_t attempt = 0; attempt < N; ++attempt) {
      const Eigen::RowVectorXd r = X.row(static_cast<Eigen::Index>(rng.index(N)));
      if (r.norm() > 0.0) return r / r.norm();
    }
    return random_direction();
  };

  Mat D(k, p);
  for (Eigen::Index a = 0; a < k; ++a) D.row(a) = random_direction();
  Mat C = Mat::Zero(X.rows(), k);
  DictResult result;
  const double rows = static_cast<double>(N);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    sparse_code(X, D, config.alpha, config.cd_sweeps, C);
    // Block-coordinate atom updates: argmin over unit d of ||R_a - c_a d||^2 is R_a^T c_a normalized.
    Mat R = X - C * D;
    for (Eigen::Index a = 0; a < k; ++a) {
      R += C.col(a) * D.row(a);
      const Eigen::RowVectorXd v = C.col(a).transpose() * R;
      const double norm = v.norm();
      if (norm > 0.0) {
        D.row(a) = v / norm;
      } else {
        D.row(a) = random_row();
        result.reinitialized.emplace_back(it, static_cast<std::size_t>(a));
      }
      R -= C.col(a) * D.row(a);
    }
    const double sq = R.squaredNorm();
    result.objective.push_back(0.5 * sq + config.alpha * C.cwiseAbs().sum());
    result.reconstruction.push_back(sq / rows);
  }
  result.reconstruction_error = (X - C * D).squaredNorm() / rows;
  result.atoms = to_tensor(D);
  result.codes = to_tensor(C);
  return result;
}

}  // namespace ssmlab
