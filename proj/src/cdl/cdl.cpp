// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/cdl.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "histoage/checkpoint.hpp"
#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/parallel.hpp"
#include "histoage/rng.hpp"

namespace histoage {

void EncoderConfig::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (widths[i] <= 0) throw ConfigError("cdl.widths", "channel widths must be positive");
    if (depths[i] <= 0) throw ConfigError("cdl.depths", "block depths must be positive");
  }
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("cdl.kernel", "kernel must be odd and positive");
  if (input_side < 4) throw ConfigError("cdl.input_side", "input side too small");
  if (embed_dim <= 0) throw ConfigError("cdl.embed_dim.S1", "embedding width must be positive");
}

int default_embed_dim(ScaleTag scale) {
  switch (scale) {
    case ScaleTag::kS1: return 512;
    case ScaleTag::kS2: return 128;
    case ScaleTag::kS3: break;
  }
  throw ContractError("no encoder is trained for S3");
}

namespace {

std::string conv_name(int block, int layer, const char* what) {
  return "enc.b" + std::to_string(block + 1) + ".c" + std::to_string(layer + 1) + "." + what;
}

template <typename T>
BasicTensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

}  // namespace

template <typename T>
CdlNetwork<T>::CdlNetwork(EncoderConfig encoder, PredictorConfig predictor, std::uint64_t init_seed)
    : encoder_(encoder) {
  encoder_.validate();
  if (predictor.hidden < 0) throw ConfigError("predictor.hidden", "hidden width must be >= 0");
  const int d = encoder_.embed_dim;
  hidden_ = predictor.hidden > 0 ? predictor.hidden : std::max(1, d / 4);
  Rng rng(init_seed);
  const auto k = static_cast<std::size_t>(encoder_.kernel);
  std::size_t in = 3;
  for (int b = 0; b < 3; ++b) {
    for (int l = 0; l < encoder_.depths[b]; ++l) {
      const auto out = static_cast<std::size_t>(encoder_.widths[b]);
      store_.add_parameter(conv_name(b, l, "w"), he_normal<T>({out, in, k, k}, in * k * k, rng));
      store_.add_parameter(conv_name(b, l, "b"), BasicTensor<T>({out}), false);
      in = out;
    }
  }
  const auto du = static_cast<std::size_t>(d);
  const auto hu = static_cast<std::size_t>(hidden_);
  store_.add_parameter("enc.fc1.w", he_normal<T>({du, in}, in, rng));
  store_.add_parameter("enc.fc1.b", BasicTensor<T>({du}), false);
  store_.add_parameter("enc.fc2.w", he_normal<T>({du, du}, du, rng));
  store_.add_parameter("enc.fc2.b", BasicTensor<T>({du}), false);
  store_.add_parameter("pred.fc1.w", he_normal<T>({hu, du}, du, rng));
  store_.add_parameter("pred.fc1.b", BasicTensor<T>({hu}), false);
  store_.add_parameter("pred.bn.gamma", BasicTensor<T>({hu}, T{1}), false);
  store_.add_parameter("pred.bn.beta", BasicTensor<T>({hu}), false);
  store_.add_parameter("pred.fc2.w", he_normal<T>({du, hu}, hu, rng));
  store_.add_parameter("pred.fc2.b", BasicTensor<T>({du}), false);
  store_.add_buffer("pred.bn.running_mean", BasicTensor<T>({hu}));
  store_.add_buffer("pred.bn.running_var", BasicTensor<T>({hu}, T{1}));
}

template <typename T>
ad::Var<T> CdlNetwork<T>::encode(ad::Tape<T>& tape, ad::Var<T> image) const {
  const auto side = static_cast<std::size_t>(encoder_.input_side);
  if (image.shape() != Shape{3, side, side})
    throw ShapeError("encode: expected [3," + std::to_string(side) + "," + std::to_string(side) +
                     "], got " + shape_str(image.shape()));
  ad::Var<T> x = image;
  for (int b = 0; b < 3; ++b) {
    for (int l = 0; l < encoder_.depths[b]; ++l)
      x = ad::relu(ad::conv2d(x, tape.parameter(conv_name(b, l, "w")), tape.parameter(conv_name(b, l, "b"))));
    if (b < 2) x = ad::max_pool2(x);
  }
  x = ad::global_average_pool(x);
  x = ad::relu(ad::fully_connected(x, tape.parameter("enc.fc1.w"), tape.parameter("enc.fc1.b")));
  return ad::relu(ad::fully_connected(x, tape.parameter("enc.fc2.w"), tape.parameter("enc.fc2.b")));
}

template <typename T>
ad::Var<T> CdlNetwork<T>::predict(ad::Tape<T>& tape, ad::Var<T> z, ad::BatchNormMode mode) {
  auto& buffers = store_.buffers();
  ad::BatchNormState<T> state{&buffers[store_.buffer_index("pred.bn.running_mean")].value,
                              &buffers[store_.buffer_index("pred.bn.running_var")].value, bn_momentum_,
                              1e-5};
  auto h = ad::fully_connected(z, tape.parameter("pred.fc1.w"), tape.parameter("pred.fc1.b"));
  h = ad::relu(ad::batch_norm(h, tape.parameter("pred.bn.gamma"), tape.parameter("pred.bn.beta"), state, mode));
  return ad::fully_connected(h, tape.parameter("pred.fc2.w"), tape.parameter("pred.fc2.b"));
}

template <typename T>
template <typename U>
CdlNetwork<U> CdlNetwork<T>::cast() const {
  CdlNetwork<U> out;
  out.encoder_ = encoder_;
  out.hidden_ = hidden_;
  out.bn_momentum_ = bn_momentum_;
  out.store_ = store_.template cast<U>();
  return out;
}

template class CdlNetwork<float>;
template class CdlNetwork<double>;
template CdlNetwork<double> CdlNetwork<float>::cast<double>() const;
template CdlNetwork<float> CdlNetwork<double>::cast<float>() const;
template CdlNetwork<float> CdlNetwork<float>::cast<float>() const;
template CdlNetwork<double> CdlNetwork<double>::cast<double>() const;

double cosine_loss(std::span<const double> p, std::span<const double> z) {
  if (p.size() != z.size() || p.empty())
    throw ShapeError("cosine_loss: lengths " + std::to_string(p.size()) + " and " + std::to_string(z.size()));
  double dot = 0, pp = 0, zz = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dot += p[i] * z[i];
    pp += p[i] * p[i];
    zz += z[i] * z[i];
  }
  if (pp == 0 || zz == 0) throw NumericError("cosine_loss: degenerate zero-norm embedding");
  return std::clamp(-dot / (std::sqrt(pp) * std::sqrt(zz)), -1.0, 1.0);
}

template <typename T>
ad::Var<T> negative_cosine(ad::Var<T> p, ad::Var<T> z) {
  if (p.shape() != z.shape() || p.shape().size() != 2)
    throw ShapeError("negative_cosine: " + shape_str(p.shape()) + " vs " + shape_str(z.shape()));
  const std::size_t n = p.shape()[0], d = p.shape()[1];
  for (const auto* v : {&p.value(), &z.value()}) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += static_cast<double>((*v)[i * d + j]) * (*v)[i * d + j];
      if (s == 0) throw NumericError("negative_cosine: degenerate zero-norm embedding in row " + std::to_string(i));
    }
  }
  auto s = ad::sum(ad::mul(ad::l2_normalize(p), ad::l2_normalize(z)));
  return ad::scale(s, -1.0 / static_cast<double>(n));
}

template ad::Var<float> negative_cosine(ad::Var<float>, ad::Var<float>);
template ad::Var<double> negative_cosine(ad::Var<double>, ad::Var<double>);

template <typename T>
BasicTensor<T> image_tensor(const ImageF& image) {
  const auto w = static_cast<std::size_t>(image.width), h = static_cast<std::size_t>(image.height);
  BasicTensor<T> out({3, h, w});
  auto dst = out.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) dst[(c * h + y) * w + x] = static_cast<T>(image.data[(y * w + x) * 3 + c]);
  return out;
}

template BasicTensor<float> image_tensor(const ImageF&);
template BasicTensor<double> image_tensor(const ImageF&);

namespace {

template <typename T>
std::vector<T> forward_only(const CdlNetwork<T>& net, const ImageF& view) {
  ad::Tape<T> tape(&net.store());
  auto z = net.encode(tape, tape.constant(image_tensor<T>(view)));
  return z.value().values();
}

template <typename T>
void accumulate(ad::Gradients<T>& total, const ad::Gradients<T>& part) {
  for (std::size_t i = 0; i < total.size(); ++i) {
    auto dst = total[i].data();
    auto src = part[i].data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
}

template <typename T>
BasicTensor<T> stack_rows(const std::vector<std::vector<T>>& rows) {
  const std::size_t d = rows.front().size();
  std::vector<T> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return BasicTensor<T>({rows.size(), d}, std::move(flat));
}

}  // namespace

template <typename T>
LossAndGradients<T> cdl_loss_and_gradients(CdlNetwork<T>& net, std::span<const ViewPair> batch,
                                           bool recompute_activations) {
  if (batch.empty()) throw ContractError("cdl step: empty batch");
  const std::size_t n = batch.size();
  const auto d = static_cast<std::size_t>(net.embed_dim());
  std::vector<std::unique_ptr<ad::Tape<T>>> tapes(n);
  std::vector<std::size_t> z1_ids(n);
  std::vector<std::vector<T>> z1(n), z2(n);

  parallel_for(n, [&](std::size_t i) {
    z2[i] = forward_only(net, batch[i].v2);
    if (recompute_activations) {
      z1[i] = forward_only(net, batch[i].v1);
    } else {
      tapes[i] = std::make_unique<ad::Tape<T>>(&net.store());
      auto z = net.encode(*tapes[i], tapes[i]->constant(image_tensor<T>(batch[i].v1)));
      z1_ids[i] = z.id;
      z1[i] = z.value().values();
    }
  });

  LossAndGradients<T> out;
  ad::Tape<T> head(&net.store());
  auto z1v = head.variable(stack_rows(z1));
  auto p = net.predict(head, z1v, n >= 2 ? ad::BatchNormMode::kTrain : ad::BatchNormMode::kEval);
  auto loss = negative_cosine(p, head.constant(stack_rows(z2)));
  out.loss = static_cast<double>(loss.value().item());
  if (!std::isfinite(out.loss)) {
    out.z2 = std::move(z2);
    return out;
  }
  out.grads = head.backward(loss);
  const auto dz1 = head.grad(z1v);

  std::vector<ad::Gradients<T>> parts(n);
  parallel_for(n, [&](std::size_t i) {
    BasicTensor<T> up({d});
    std::copy_n(dz1.data().begin() + static_cast<std::ptrdiff_t>(i * d), d, up.data().begin());
    if (recompute_activations) {
      ad::Tape<T> tape(&net.store());
      auto z = net.encode(tape, tape.constant(image_tensor<T>(batch[i].v1)));
      parts[i] = tape.backward(z, up);
    } else {
      parts[i] = tapes[i]->backward(ad::Var<T>{tapes[i].get(), z1_ids[i]}, up);
      tapes[i].reset();
    }
  });
  for (const auto& part : parts) accumulate(out.grads, part);
  out.z2 = std::move(z2);
  return out;
}

template <typename T>
LossAndGradients<T> cdl_loss_single_tape(CdlNetwork<T>& net, std::span<const ViewPair> batch) {
  if (batch.empty()) throw ContractError("cdl step: empty batch");
  ad::Tape<T> tape(&net.store());
  std::vector<ad::Var<T>> z1, z2;
  for (const auto& pair : batch) {
    z1.push_back(net.encode(tape, tape.constant(image_tensor<T>(pair.v1))));
    z2.push_back(ad::stop_gradient(net.encode(tape, tape.constant(image_tensor<T>(pair.v2)))));
  }
  const auto mode = batch.size() >= 2 ? ad::BatchNormMode::kTrain : ad::BatchNormMode::kEval;
  auto p = net.predict(tape, ad::stack(z1), mode);
  auto loss = negative_cosine(p, ad::stack(z2));
  LossAndGradients<T> out;
  out.loss = static_cast<double>(loss.value().item());
  for (const auto& z : z2) out.z2.push_back(z.value().values());
  if (std::isfinite(out.loss)) out.grads = tape.backward(loss);
  return out;
}

template LossAndGradients<float> cdl_loss_and_gradients(CdlNetwork<float>&, std::span<const ViewPair>, bool);
template LossAndGradients<double> cdl_loss_and_gradients(CdlNetwork<double>&, std::span<const ViewPair>, bool);
template LossAndGradients<float> cdl_loss_single_tape(CdlNetwork<float>&, std::span<const ViewPair>);
template LossAndGradients<double> cdl_loss_single_tape(CdlNetwork<double>&, std::span<const ViewPair>);

namespace {

std::string std_diagnostics(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) return "no embeddings";
  const std::size_t d = rows.front().size();
  std::vector<double> sd(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0, q = 0;
    for (const auto& r : rows) m += r[j];
    m /= static_cast<double>(rows.size());
    for (const auto& r : rows) q += (r[j] - m) * (r[j] - m);
    sd[j] = std::sqrt(q / static_cast<double>(rows.size()));
  }
  std::string out = "embedding std per dimension:";
  for (const double v : sd) out += " " + format_number(v);
  return out;
}

}  // namespace

double cdl_step(CdlNetwork<float>& net, ad::Sgd<float>& optimizer, std::span<const ViewPair> batch, double lr,
                ad::StepContext ctx, std::vector<std::vector<float>>* z2_out, bool recompute_activations) {
  auto result = cdl_loss_and_gradients(net, batch, recompute_activations);
  if (!std::isfinite(result.loss))
    throw NumericError("non-finite loss at epoch " + std::to_string(ctx.epoch) + " batch " +
                       std::to_string(ctx.batch) + "; " + std_diagnostics(result.z2));
  optimizer.step(net.store(), result.grads, lr, ctx);
  if (z2_out != nullptr)
    for (auto& row : result.z2) z2_out->push_back(std::move(row));
  return result.loss;
}

double collapse_threshold(int embed_dim) { return 0.01 / std::sqrt(static_cast<double>(embed_dim)); }

double normalized_embedding_std(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) return 0.0;
  const std::size_t d = rows.front().size();
  std::vector<std::vector<double>> unit;
  unit.reserve(rows.size());
  for (const auto& r : rows) {
    double s = 0;
    for (const float v : r) s += static_cast<double>(v) * v;
    const double norm = std::max(std::sqrt(s), 1e-12);
    std::vector<double> u(d);
    for (std::size_t j = 0; j < d; ++j) u[j] = r[j] / norm;
    unit.push_back(std::move(u));
  }
  double total = 0;
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0, q = 0;
    for (const auto& u : unit) m += u[j];
    m /= static_cast<double>(unit.size());
    for (const auto& u : unit) q += (u[j] - m) * (u[j] - m);
    total += std::sqrt(q / static_cast<double>(unit.size()));
  }
  return total / static_cast<double>(d);
}

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  if (order.size() == 1) {
    out.push_back({order[0], order[0]});
    return out;
  }
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // Train-mode batch norm needs two rows; fold a trailing singleton into the previous batch.
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

}  // namespace

CdlTrainResult train_cdl(std::span<const Image8> patches, const CdlTrainConfig& config, const EpochCallback& on_epoch) {
  if (patches.empty()) throw ContractError("train_cdl: no foreground patches");
  if (config.batch_size < 2) throw ConfigError("cdl.batch_size", "batch size must be >= 2");
  if (config.epochs == 0) throw ConfigError("cdl.epochs", "epochs must be >= 1");
  config.augment.validate();
  for (const auto& p : patches)
    if (p.width < config.augment.crop_side || p.height < config.augment.crop_side || p.channels != 3)
      throw ShapeError("train_cdl: patch smaller than the crop side or not RGB");

  CdlTrainResult result{CdlNetwork<float>(config.encoder, config.predictor, derive_seed(config.seed, "init")), {}, {}, false};
  auto& net = result.network;
  net.set_bn_momentum(config.bn_momentum);
  ad::Sgd<float> optimizer(config.sgd);
  const double threshold = collapse_threshold(net.embed_dim());
  std::size_t low_streak = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(patches.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(derive_seed(config.seed, "shuffle"), epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    const auto batches = make_batches(std::move(order), config.batch_size);
    const std::uint64_t epoch_seed = derive_seed(derive_seed(config.seed, "augment"), epoch);

    EpochRecord record;
    record.epoch = epoch;
    record.learning_rate = ad::cosine_learning_rate(config.sgd.learning_rate, epoch, config.epochs);
    std::vector<std::vector<float>> z2;
    double loss_sum = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      std::vector<ViewPair> pairs(idx.size());
      parallel_for(idx.size(), [&](std::size_t i) {
        // A patch repeated within a batch gets distinct views.
        pairs[i] = augment_pair(to_float(patches[idx[i]]), config.augment,
                                derive_seed(derive_seed(epoch_seed, idx[i]), i));
      });
      try {
        loss_sum += cdl_step(net, optimizer, pairs, record.learning_rate, {epoch, b}, &z2,
                             config.recompute_activations);
      } catch (const NumericError& e) {
        record.aborted = true;
        result.warnings.push_back(std::string("epoch aborted: ") + e.what());
        break;
      }
    }
    record.loss = record.aborted ? std::nan("") : loss_sum / static_cast<double>(batches.size());
    record.embedding_std = normalized_embedding_std(z2);
    low_streak = record.embedding_std < threshold ? low_streak + 1 : 0;
    if (low_streak == config.collapse_patience && config.collapse_patience > 0) {
      result.collapse_detected = true;
      result.warnings.push_back("embedding collapse: mean per-dimension std " + format_number(record.embedding_std) +
                                " below " + format_number(threshold) + " for " +
                                std::to_string(config.collapse_patience) + " consecutive epochs (epoch " +
                                std::to_string(epoch) + ")");
    }
    result.epochs.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const CdlNetwork<float>& net, ScaleTag scale) {
  const auto& e = net.encoder_config();
  nlohmann::json meta = {
      {"format", "cdl"},
      {"scale", to_string(scale)},
      {"encoder",
       {{"widths", e.widths}, {"depths", e.depths}, {"kernel", e.kernel}, {"input_side", e.input_side},
        {"embed_dim", e.embed_dim}}},
      {"predictor", {{"hidden", net.hidden_width()}}},
  };
  save_archive(path, archive_from_store(net.store(), std::move(meta)), kCheckpointMagic);
}

CdlCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto archive = load_archive(path, kCheckpointMagic);
  try {
    const auto& m = archive.meta;
    if (m.at("format") != "cdl") throw ContractError("not a CDL checkpoint: " + path.string());
    EncoderConfig e;
    e.widths = m.at("encoder").at("widths").get<std::array<int, 3>>();
    e.depths = m.at("encoder").at("depths").get<std::array<int, 3>>();
    e.kernel = m.at("encoder").at("kernel").get<int>();
    e.input_side = m.at("encoder").at("input_side").get<int>();
    e.embed_dim = m.at("encoder").at("embed_dim").get<int>();
    PredictorConfig p{m.at("predictor").at("hidden").get<int>()};
    CdlCheckpoint out{CdlNetwork<float>(e, p, 0), parse_scale_tag(m.at("scale").get<std::string>())};
    restore_store(archive, out.network.store());
    return out;
  } catch (const nlohmann::json::exception& ex) {
    throw ContractError("malformed checkpoint metadata in " + path.string() + ": " + ex.what());
  }
}

std::vector<std::vector<float>> extract_features(CdlNetwork<float>& net, std::span<const Image8> patches) {
  const int side = net.encoder_config().input_side;
  std::vector<std::vector<float>> out(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) {
    ImageF img = to_float(patches[i]);
    if (img.width < side || img.height < side || img.width != img.height)
      throw ShapeError("extract_features: patch " + std::to_string(i) + " is not a square of side >= " +
                       std::to_string(side));
    if (img.width != side) img = center_crop(img, side);
    ad::Tape<float> tape(&net.store());
    auto z = net.encode(tape, tape.constant(image_tensor<float>(img)));
    auto p = net.predict(tape, ad::reshape(z, {1, static_cast<std::size_t>(net.embed_dim())}),
                         ad::BatchNormMode::kEval);
    out[i] = p.value().values();
  });
  return out;
}

std::vector<std::vector<float>> extract_features(const CdlCheckpoint& checkpoint, std::span<const Image8> patches,
                                                 ScaleTag scale) {
  if (checkpoint.scale != scale)
    throw ContractError("checkpoint was trained on " + to_string(checkpoint.scale) + ", patches are " +
                        to_string(scale));
  auto net = checkpoint.network.cast<float>();
  return extract_features(net, patches);
}

}  // namespace histoage
