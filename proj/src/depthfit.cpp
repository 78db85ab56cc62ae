#include "radiodepth/depthfit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "radiodepth/io.hpp"

namespace radiodepth {

using nlohmann::json;

void FitConfig::validate() const {
  loss.validate();
  if (max_iters < 1) throw ConfigError("fit: max_iters must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("fit: learning_rate must be > 0");
  if (!(init_sigma >= 0.0)) throw ConfigError("fit: init sigma must be >= 0");
  if (init == InitKind::constant && !(init_constant > 0.0))
    throw ConfigError("fit: constant init depth must be > 0");
}

FitResult optimize_depth(const DepthMapSet& target, const FitConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.rng_seed);
  const std::size_t N = target.maps.size();

  // Log-depth parameters on the target's valid pixels.
  std::vector<DepthMap> log_depth;
  for (const auto& m : target.maps) {
    DepthMap z(m.width(), m.height());
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m.valid(i)) continue;
      double init = cfg.init == InitKind::constant
                        ? cfg.init_constant
                        : m[i] + cfg.init_constant + cfg.init_sigma * rng.normal();
      z[i] = std::log(std::max(init, 1.0));
    }
    log_depth.push_back(std::move(z));
  }

  auto to_depth = [&] {
    std::vector<DepthMap> out = log_depth;
    for (auto& m : out)
      for (double& v : m.values())
        if (!std::isnan(v)) v = std::exp(v);
    return out;
  };

  FitResult result;
  result.depth.geometry = target.geometry;
  result.depth.object_ids = target.object_ids;
  for (int it = 0; it < cfg.max_iters; ++it) {
    const auto depth = to_depth();
    const LossResult loss = evaluate_loss(depth, target.maps, cfg.loss, 2);
    if (!std::isfinite(loss.value))
      throw NumericError("optimize_depth: non-finite loss at iteration " + std::to_string(it));
    result.trace.push_back(loss.value);
    result.iterations = it;
    if (loss.value <= cfg.convergence_tol) {
      result.converged = true;
      result.depth.maps = depth;
      return result;
    }
    // Chain rule to log-depth: dL/dz = dL/dy * y.
    std::vector<double> sq;
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t i = 0; i < depth[j].size(); ++i)
        if (depth[j].valid(i)) {
          const double g = loss.gradient[j][i] * depth[j][i];
          sq.push_back(g * g);
        }
    const double norm2 = pairwise_sum(sq);
    if (!(norm2 > 0.0)) {
      result.converged = true;
      result.depth.maps = depth;
      return result;
    }
    const double step = cfg.learning_rate * loss.value / norm2;
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t i = 0; i < depth[j].size(); ++i)
        if (depth[j].valid(i)) log_depth[j][i] -= step * loss.gradient[j][i] * depth[j][i];
  }
  result.depth.maps = to_depth();
  const double final_loss = evaluate_loss(result.depth.maps, target.maps, cfg.loss, 2).value;
  if (!std::isfinite(final_loss))
    throw NumericError("optimize_depth: non-finite loss at iteration " +
                       std::to_string(cfg.max_iters));
  result.trace.push_back(final_loss);
  result.iterations = cfg.max_iters;
  result.converged = final_loss <= cfg.convergence_tol;
  return result;
}

// ---------------------------------------------------------------------------
// Patch regressor

void TrainConfig::validate() const {
  loss.validate();
  if (patch_radius < 0) throw ConfigError("train: patch_radius must be >= 0");
  if (hidden.empty()) throw ConfigError("train: at least one hidden layer required");
  for (int h : hidden)
    if (h < 1) throw ConfigError("train: hidden widths must be >= 1");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
}

std::size_t PatchRegressor::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

std::vector<double> PatchRegressor::parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.insert(out.end(), weights[l].data(), weights[l].data() + weights[l].size());
    out.insert(out.end(), biases[l].data(), biases[l].data() + biases[l].size());
  }
  return out;
}

void PatchRegressor::set_parameters(std::span<const double> values) {
  if (values.size() != parameter_count())
    throw std::invalid_argument("PatchRegressor: parameter count mismatch");
  std::size_t at = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    std::copy_n(values.begin() + at, weights[l].size(), weights[l].data());
    at += weights[l].size();
    std::copy_n(values.begin() + at, biases[l].size(), biases[l].data());
    at += biases[l].size();
  }
}

namespace {

// Line-integral scale of the input features.
constexpr double kFeatureScale = 0.5;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Pixels inside the union of the object masks, in raster order.
std::vector<std::size_t> masked_pixels(const LabelMask& mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.pixel_count(); ++i)
    if (mask.any(i)) out.push_back(i);
  return out;
}

Eigen::MatrixXd features(const PatchRegressor& m, const DepthMap& radiograph,
                         std::span<const std::size_t> pixels) {
  const int k = m.patch_radius;
  const int W = radiograph.width(), H = radiograph.height();
  Eigen::MatrixXd X(m.input_size(), static_cast<Eigen::Index>(pixels.size()));
  for (std::size_t c = 0; c < pixels.size(); ++c) {
    const int u = radiograph.u_of(pixels[c]);
    const int v = radiograph.v_of(pixels[c]);
    int row = 0;
    for (int dv = -k; dv <= k; ++dv)
      for (int du = -k; du <= k; ++du) {
        const int uu = std::clamp(u + du, 0, W - 1);
        const int vv = std::clamp(v + dv, 0, H - 1);
        const double intensity = std::max(radiograph.at(uu, vv), 1e-6);
        X(row++, static_cast<Eigen::Index>(c)) = -std::log(intensity) * kFeatureScale;
      }
    X(row++, static_cast<Eigen::Index>(c)) = W > 1 ? 2.0 * u / (W - 1) - 1.0 : 0.0;
    X(row, static_cast<Eigen::Index>(c)) = H > 1 ? 2.0 * v / (H - 1) - 1.0 : 0.0;
  }
  return X;
}

struct Activations {
  std::vector<Eigen::MatrixXd> pre;   // per hidden layer, before softplus
  std::vector<Eigen::MatrixXd> post;  // inputs to each layer (post[0] = X)
  Eigen::MatrixXd output;             // log-depths
};

Activations forward(const PatchRegressor& m, Eigen::MatrixXd X) {
  Activations a;
  a.post.push_back(std::move(X));
  const std::size_t L = m.weights.size();
  for (std::size_t l = 0; l < L; ++l) {
    Eigen::MatrixXd z = m.weights[l] * a.post.back();
    z.colwise() += m.biases[l];
    if (l + 1 == L) {
      a.output = std::move(z);
    } else {
      a.pre.push_back(z);
      a.post.push_back(z.unaryExpr([](double x) { return softplus(x); }));
    }
  }
  return a;
}

// Channel c of the outputs for object k: dual models interleave front/back.
std::vector<DepthMap> gt_channels(const PatchRegressor& m, const DepthMapSet& gt) {
  std::vector<DepthMap> out;
  for (int id : m.object_ids) {
    auto k = gt.object_index(id);
    if (!k) throw std::invalid_argument("regressor: object " + std::to_string(id) +
                                        " missing from ground truth");
    out.push_back(gt.front(*k));
    if (m.dual_face) out.push_back(gt.back(*k));
  }
  return out;
}

double sample_loss_and_gradient(const PatchRegressor& m, const TrainingSample& s,
                                std::vector<Eigen::MatrixXd>* dW,
                                std::vector<Eigen::VectorXd>* db) {
  const auto pixels = masked_pixels(s.mask);
  const auto targets = gt_channels(m, s.gt);
  const int C = m.output_size();
  if (pixels.empty()) return 0.0;
  const Activations act = forward(m, features(m, s.radiograph, pixels));

  std::vector<DepthMap> pred;
  for (int c = 0; c < C; ++c) {
    DepthMap p(targets[c].width(), targets[c].height());
    for (std::size_t col = 0; col < pixels.size(); ++col)
      if (targets[c].valid(pixels[col]))
        p[pixels[col]] = std::exp(act.output(c, static_cast<Eigen::Index>(col)));
    pred.push_back(std::move(p));
  }
  const LossResult loss = evaluate_loss(pred, targets, m.loss, m.dual_face ? 2 : 1);
  if (!dW) return loss.value;

  Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(C, static_cast<Eigen::Index>(pixels.size()));
  for (int c = 0; c < C; ++c)
    for (std::size_t col = 0; col < pixels.size(); ++col) {
      const std::size_t i = pixels[col];
      if (pred[c].valid(i)) delta(c, static_cast<Eigen::Index>(col)) = loss.gradient[c][i] * pred[c][i];
    }
  for (std::size_t l = m.weights.size(); l-- > 0;) {
    (*dW)[l].noalias() += delta * act.post[l].transpose();
    (*db)[l] += delta.rowwise().sum();
    if (l == 0) break;
    Eigen::MatrixXd back = m.weights[l].transpose() * delta;
    delta = back.cwiseProduct(act.pre[l - 1].unaryExpr([](double x) { return sigmoid(x); }));
  }
  return loss.value;
}

void zero_like(const PatchRegressor& m, std::vector<Eigen::MatrixXd>& dW,
               std::vector<Eigen::VectorXd>& db) {
  dW.clear();
  db.clear();
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    dW.push_back(Eigen::MatrixXd::Zero(m.weights[l].rows(), m.weights[l].cols()));
    db.push_back(Eigen::VectorXd::Zero(m.biases[l].size()));
  }
}

void check_dataset(std::span<const TrainingSample> data) {
  if (data.size() < 2) throw std::invalid_argument("train: at least two training scenes required");
  for (const auto& s : data) {
    if (!(s.gt.geometry == data[0].gt.geometry))
      throw std::invalid_argument("train: all scenes must share one geometry");
    if (!s.radiograph.matches(s.gt.geometry))
      throw std::invalid_argument("train: radiograph does not match geometry");
  }
}

double dataset_loss(const PatchRegressor& m, std::span<const TrainingSample> data) {
  std::vector<double> losses;
  for (const auto& s : data) losses.push_back(sample_loss_and_gradient(m, s, nullptr, nullptr));
  return pairwise_sum(losses) / static_cast<double>(losses.size());
}

}  // namespace

PatchRegressor init_regressor(std::span<const TrainingSample> data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("init_regressor: empty dataset");
  PatchRegressor m;
  m.patch_radius = cfg.patch_radius;
  m.hidden = cfg.hidden;
  m.object_ids = data[0].gt.object_ids;
  m.dual_face = cfg.dual_face;
  m.width = data[0].gt.geometry.width;
  m.height = data[0].gt.geometry.height;
  m.seed = cfg.rng_seed;
  m.loss = cfg.loss;

  Rng rng(cfg.rng_seed);
  std::vector<int> sizes{m.input_size()};
  sizes.insert(sizes.end(), m.hidden.begin(), m.hidden.end());
  sizes.push_back(m.output_size());
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const int in = sizes[l], out = sizes[l + 1];
    const bool last = l + 2 == sizes.size();
    const double sigma = (last ? 0.1 : 1.0) / std::sqrt(static_cast<double>(in));
    Eigen::MatrixXd W(out, in);
    for (Eigen::Index c = 0; c < W.cols(); ++c)
      for (Eigen::Index r = 0; r < W.rows(); ++r) W(r, c) = sigma * rng.normal();
    m.weights.push_back(std::move(W));
    m.biases.push_back(Eigen::VectorXd::Zero(out));
  }

  // Output bias: mean log-depth of each target map over the training data.
  const int C = m.output_size();
  for (int c = 0; c < C; ++c) {
    std::vector<double> logs;
    for (const auto& s : data) {
      const auto targets = gt_channels(m, s.gt);
      for (std::size_t i = 0; i < targets[c].size(); ++i)
        if (targets[c].valid(i)) logs.push_back(std::log(targets[c][i]));
    }
    if (!logs.empty())
      m.biases.back()[c] = pairwise_sum(logs) / static_cast<double>(logs.size());
  }
  return m;
}

double batch_loss_and_gradient(const PatchRegressor& model,
                               std::span<const TrainingSample> batch,
                               std::vector<double>* gradient) {
  std::vector<Eigen::MatrixXd> dW;
  std::vector<Eigen::VectorXd> db;
  zero_like(model, dW, db);
  std::vector<double> losses;
  for (const auto& s : batch)
    losses.push_back(sample_loss_and_gradient(model, s, gradient ? &dW : nullptr,
                                              gradient ? &db : nullptr));
  const double scale = 1.0 / static_cast<double>(batch.size());
  if (gradient) {
    gradient->clear();
    for (std::size_t l = 0; l < dW.size(); ++l) {
      dW[l] *= scale;
      db[l] *= scale;
      gradient->insert(gradient->end(), dW[l].data(), dW[l].data() + dW[l].size());
      gradient->insert(gradient->end(), db[l].data(), db[l].data() + db[l].size());
    }
  }
  return pairwise_sum(losses) * scale;
}

TrainResult train_regressor(std::span<const TrainingSample> data, const TrainConfig& cfg) {
  cfg.validate();
  check_dataset(data);
  TrainResult result;
  result.model = init_regressor(data, cfg);
  PatchRegressor& m = result.model;

  result.initial_loss = dataset_loss(m, data);
  if (!std::isfinite(result.initial_loss))
    throw NumericError("train: non-finite initial loss");
  result.curve.push_back(result.initial_loss);

  Rng rng(derive_seed(cfg.rng_seed, "train-order"));
  std::vector<std::size_t> order(data.size());
  std::vector<double> params = m.parameters();
  std::vector<double> grad;
  std::vector<TrainingSample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<double> epoch_losses;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t b = start; b < std::min(order.size(), start + cfg.batch_size); ++b)
        batch.push_back(data[order[b]]);
      const double loss = batch_loss_and_gradient(m, batch, &grad);
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch starting at scene " + std::to_string(order[start]));
      epoch_losses.push_back(loss);
      double scale = cfg.learning_rate;
      if (cfg.grad_clip > 0.0) {
        double norm = 0.0;
        for (double g : grad) norm += g * g;
        norm = std::sqrt(norm);
        if (norm > cfg.grad_clip) scale *= cfg.grad_clip / norm;
      }
      for (std::size_t p = 0; p < params.size(); ++p) params[p] -= scale * grad[p];
      m.set_parameters(params);
    }
    result.curve.push_back(pairwise_sum(epoch_losses) / static_cast<double>(epoch_losses.size()));
  }
  result.final_loss = dataset_loss(m, data);
  return result;
}

DepthMapSet predict(const PatchRegressor& model, const ImagingGeometry& geometry,
                    const DepthMap& radiograph, const LabelMask& mask) {
  if (!radiograph.matches(geometry) || mask.width() != geometry.width ||
      mask.height() != geometry.height)
    throw std::invalid_argument("predict: radiograph or mask does not match geometry");
  if (model.width != geometry.width || model.height != geometry.height)
    throw std::invalid_argument("predict: model was trained for a " +
                                std::to_string(model.width) + "x" +
                                std::to_string(model.height) + " detector");
  DepthMapSet out;
  out.geometry = geometry;
  out.object_ids = model.object_ids;
  out.maps.assign(2 * model.object_ids.size(), DepthMap(geometry.width, geometry.height));

  const auto pixels = masked_pixels(mask);
  if (pixels.empty()) return out;
  const Activations act = forward(model, features(model, radiograph, pixels));
  const int per_object = model.dual_face ? 2 : 1;
  for (std::size_t k = 0; k < model.object_ids.size(); ++k) {
    const auto channel = mask.channel_of(model.object_ids[k]);
    if (!channel) continue;
    for (std::size_t col = 0; col < pixels.size(); ++col) {
      const std::size_t i = pixels[col];
      if (!mask.has(*channel, i)) continue;
      const auto c = static_cast<Eigen::Index>(col);
      out.front(k)[i] = std::exp(act.output(per_object * static_cast<Eigen::Index>(k), c));
      // The two outputs are independent, so order them for a valid depth set.
      if (model.dual_face)
        out.back(k)[i] = std::max(
            out.front(k)[i], std::exp(act.output(2 * static_cast<Eigen::Index>(k) + 1, c)));
    }
  }
  return out;
}

TrainingSample make_training_sample(const GroundTruth& gt) {
  return {gt.radiograph, gt.depth, gt.labels};
}

void save_regressor(const std::filesystem::path& path, const PatchRegressor& m) {
  json layers = json::array();
  for (std::size_t l = 0; l < m.weights.size(); ++l)
    layers.push_back({{"rows", m.weights[l].rows()}, {"cols", m.weights[l].cols()}});
  json header{{"format", "radiodepth-regressor"},
              {"version", 1},
              {"patch_radius", m.patch_radius},
              {"hidden", m.hidden},
              {"activation", "softplus"},
              {"object_ids", m.object_ids},
              {"dual_face", m.dual_face},
              {"width", m.width},
              {"height", m.height},
              {"seed", m.seed},
              {"loss",
               {{"variant", to_string(m.loss.variant)},
                {"alpha", m.loss.alpha},
                {"lambda_var", m.loss.lambda_var},
                {"epsilon", m.loss.epsilon},
                {"alignment_scope", to_string(m.loss.alignment_scope)}}},
              {"layers", layers},
              {"parameter_count", m.parameter_count()}};
  std::string bytes = header.dump() + "\n";
  const auto params = m.parameters();
  append_f64_le(bytes, params.data(), params.size());
  write_file(path, bytes);
}

PatchRegressor load_regressor(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t eol = bytes.find('\n');
  if (eol == std::string::npos) throw ValidationError(path.string() + ": missing header");
  PatchRegressor m;
  try {
    const json h = json::parse(bytes.substr(0, eol));
    if (h.at("format") != "radiodepth-regressor")
      throw ValidationError(path.string() + ": not a regressor model file");
    m.patch_radius = h.at("patch_radius").get<int>();
    m.hidden = h.at("hidden").get<std::vector<int>>();
    m.object_ids = h.at("object_ids").get<std::vector<int>>();
    m.dual_face = h.at("dual_face").get<bool>();
    m.width = h.at("width").get<int>();
    m.height = h.at("height").get<int>();
    m.seed = h.at("seed").get<std::uint64_t>();
    const auto& lj = h.at("loss");
    m.loss.variant = loss_variant_from_string(lj.at("variant").get<std::string>());
    m.loss.alpha = lj.at("alpha").get<double>();
    m.loss.lambda_var = lj.at("lambda_var").get<double>();
    m.loss.epsilon = lj.at("epsilon").get<double>();
    m.loss.alignment_scope =
        alignment_scope_from_string(lj.at("alignment_scope").get<std::string>());
    for (const auto& layer : h.at("layers")) {
      const auto rows = layer.at("rows").get<Eigen::Index>();
      const auto cols = layer.at("cols").get<Eigen::Index>();
      m.weights.push_back(Eigen::MatrixXd::Zero(rows, cols));
      m.biases.push_back(Eigen::VectorXd::Zero(rows));
    }
    if (h.at("parameter_count").get<std::size_t>() != m.parameter_count())
      throw ValidationError(path.string() + ": parameter count disagrees with layers");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  const std::size_t n = m.parameter_count();
  if (bytes.size() != eol + 1 + 8 * n)
    throw ValidationError(path.string() + ": weight blob size mismatch");
  std::vector<double> params(n);
  read_f64_le(bytes, eol + 1, params.data(), n);
  for (double p : params)
    if (!std::isfinite(p)) throw ValidationError(path.string() + ": non-finite weight");
  m.set_parameters(params);
  return m;
}

}  // namespace radiodepth
