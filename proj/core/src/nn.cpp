// SPDX-License-Identifier: Apache-2.0
#include "mte/nn.hpp"

#include <cmath>
#include <string>

#include <json.hpp>

#include "mte/error.hpp"
#include "mte/io.hpp"
#include "mte/rng.hpp"

namespace mte::nn {

namespace {
thread_local std::uint64_t g_forward_passes = 0;
}

void ModelSpec::validate() const {
  if (widths.size() < 2) throw InvalidArgument("model spec needs at least input and output widths");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0) throw InvalidArgument("model spec layer " + std::to_string(i) + " has zero width");
  }
}

std::size_t ModelSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
  return n;
}

std::size_t ModelSpec::weight_offset(std::size_t layer) const {
  std::size_t off = 0;
  for (std::size_t l = 0; l < layer; ++l) off += widths[l] * widths[l + 1] + widths[l + 1];
  return off;
}

std::size_t ModelSpec::bias_offset(std::size_t layer) const {
  return weight_offset(layer) + widths[layer] * widths[layer + 1];
}

ModelCheckpoint init_params(const ModelSpec& spec) {
  spec.validate();
  ModelCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.params.assign(spec.param_count(), 0.0);
  CounterRng rng(derive_key(spec.init_seed, 0x1417));
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / static_cast<double>(spec.widths[l]));
    const std::size_t off = spec.weight_offset(l);
    const std::size_t n = spec.widths[l] * spec.widths[l + 1];
    for (std::size_t i = 0; i < n; ++i) ckpt.params[off + i] = rng.uniform(-bound, bound);
  }
  return ckpt;
}

Matrix forward_logits(const ModelCheckpoint& ckpt, const Matrix& batch) {
  const ModelSpec& spec = ckpt.spec;
  if (ckpt.params.size() != spec.param_count()) {
    throw ShapeError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, spec needs " +
                     std::to_string(spec.param_count()));
  }
  if (batch.cols() != spec.input_dim()) {
    throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                     std::to_string(spec.input_dim()));
  }
  ++g_forward_passes;
  Matrix h = batch;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const auto w_begin = ckpt.params.begin() + static_cast<std::ptrdiff_t>(spec.weight_offset(l));
    Matrix w(in, out, std::vector<double>(w_begin, w_begin + static_cast<std::ptrdiff_t>(in * out)));
    Matrix z = matmul(h, w);
    const double* bias = ckpt.params.data() + spec.bias_offset(l);
    const bool hidden = l + 1 < spec.num_layers();
    for (std::size_t r = 0; r < z.rows(); ++r) {
      auto row = z.row_span(r);
      for (std::size_t c = 0; c < out; ++c) {
        const double v = row[c] + bias[c];
        row[c] = hidden ? (v > 0.0 ? v : 0.0) : v;
      }
    }
    h = std::move(z);
  }
  return h;
}

std::uint64_t forward_pass_count() { return g_forward_passes; }
void reset_forward_pass_count() { g_forward_passes = 0; }

TapeModel bind_parameters(ad::Tape& tape, const ModelCheckpoint& ckpt) {
  const ModelSpec& spec = ckpt.spec;
  spec.validate();
  if (ckpt.params.size() != spec.param_count()) throw ShapeError("checkpoint parameter count mismatch");
  TapeModel model;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const auto w = ckpt.params.begin() + static_cast<std::ptrdiff_t>(spec.weight_offset(l));
    const auto b = ckpt.params.begin() + static_cast<std::ptrdiff_t>(spec.bias_offset(l));
    model.weights.push_back(
        tape.parameter(Matrix(in, out, std::vector<double>(w, w + static_cast<std::ptrdiff_t>(in * out)))));
    model.biases.push_back(tape.parameter(Matrix(1, out, std::vector<double>(b, b + static_cast<std::ptrdiff_t>(out)))));
  }
  return model;
}

ad::NodeId build_logits(ad::Tape& tape, const TapeModel& model, ad::NodeId input) {
  ad::NodeId h = input;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    h = tape.add(tape.matmul(h, model.weights[l]), model.biases[l]);
    if (l + 1 < model.weights.size()) h = tape.relu(h);
  }
  return h;
}

std::vector<double> flatten_gradients(const ad::Gradients& grads, const TapeModel& model,
                                      const ModelSpec& spec) {
  std::vector<double> flat(spec.param_count(), 0.0);
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    const auto& gw = grads.at(model.weights[l]).data();
    const auto& gb = grads.at(model.biases[l]).data();
    std::copy(gw.begin(), gw.end(), flat.begin() + static_cast<std::ptrdiff_t>(spec.weight_offset(l)));
    std::copy(gb.begin(), gb.end(), flat.begin() + static_cast<std::ptrdiff_t>(spec.bias_offset(l)));
  }
  return flat;
}

OptState make_opt_state(const ModelCheckpoint& ckpt, double lr, double momentum, double weight_decay) {
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be nonnegative");
  return OptState{std::vector<double>(ckpt.params.size(), 0.0), lr, momentum, weight_decay};
}

void sgd_step(ModelCheckpoint& ckpt, std::span<const double> grads, OptState& opt) {
  auto& p = ckpt.params;
  if (grads.size() != p.size() || opt.velocity.size() != p.size()) {
    throw ShapeError("sgd_step: params " + std::to_string(p.size()) + ", grads " + std::to_string(grads.size()) +
                     ", velocity " + std::to_string(opt.velocity.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw DivergenceError("sgd_step: non-finite gradient at parameter " + std::to_string(i) + " (value " +
                            std::to_string(grads[i]) + ")");
    }
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    opt.velocity[i] = opt.momentum * opt.velocity[i] + (grads[i] + opt.weight_decay * p[i]);
    p[i] -= opt.lr * opt.velocity[i];
  }
}

void LrSchedule::validate() const {
  if (!(initial > 0.0)) throw InvalidArgument("schedule initial lr must be positive");
  if (decay_interval == 0) throw InvalidArgument("schedule decay interval must be positive");
  if (!(decay_factor > 0.0)) throw InvalidArgument("schedule decay factor must be positive");
}

double lr_at_epoch(const LrSchedule& s, std::size_t epoch) {
  if (epoch < s.warm_epochs || s.decay_factor == 1.0) return s.initial;
  const std::size_t steps = (epoch - s.warm_epochs) / s.decay_interval + 1;
  double lr = s.initial;
  for (std::size_t i = 0; i < steps; ++i) lr *= s.decay_factor;
  return lr;
}

std::string checkpoint_to_json(const ModelCheckpoint& ckpt) {
  nlohmann::json j;
  j["format"] = "mte-checkpoint";
  j["format_version"] = ckpt.format_version;
  j["spec"] = {{"widths", ckpt.spec.widths},
               {"activation", "relu"},
               {"init_seed", std::to_string(ckpt.spec.init_seed)}};
  j["params"] = ckpt.params;
  j["train_meta"] = {{"config_digest", ckpt.meta.config_digest}, {"epoch", ckpt.meta.epoch}};
  return j.dump(1) + "\n";
}

ModelCheckpoint checkpoint_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "mte-checkpoint") throw ParseError("checkpoint: wrong format tag");
    ModelCheckpoint ckpt;
    ckpt.format_version = j.at("format_version").get<int>();
    if (ckpt.format_version != kCheckpointFormatVersion) {
      throw ParseError("checkpoint: unsupported format_version " + std::to_string(ckpt.format_version));
    }
    const auto& spec = j.at("spec");
    if (spec.at("activation").get<std::string>() != "relu") throw ParseError("checkpoint: unsupported activation");
    ckpt.spec.widths = spec.at("widths").get<std::vector<std::size_t>>();
    ckpt.spec.init_seed = std::stoull(spec.at("init_seed").get<std::string>());
    ckpt.params = j.at("params").get<std::vector<double>>();
    ckpt.meta.config_digest = j.at("train_meta").at("config_digest").get<std::string>();
    ckpt.meta.epoch = j.at("train_meta").at("epoch").get<std::size_t>();
    ckpt.spec.validate();
    if (ckpt.params.size() != ckpt.spec.param_count()) {
      throw ParseError("checkpoint: " + std::to_string(ckpt.params.size()) + " params, spec needs " +
                       std::to_string(ckpt.spec.param_count()));
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_to_json(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_file(path));
}

}  // namespace mte::nn
