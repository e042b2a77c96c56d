#pragma once

// Desk-scale supervised training: SGD with momentum and cosine-annealed
// learning rate over the autodiff tape. Deterministic given seeds and a fixed
// thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "dataset.hpp"
#include "model_zoo.hpp"

namespace groupnl {

struct DivergedLoss : std::runtime_error {
  explicit DivergedLoss(const std::string& what) : std::runtime_error(what) {}
};

struct TrainHyper {
  double lr = 0.05;
  double momentum = 0.9;
  std::uint32_t batch = 32;
  std::uint32_t epochs = 20;
  std::uint64_t seed = 0;  // shuffling
};

struct EpochRecord {
  std::uint32_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

inline double evaluate_accuracy(const Model& m, const Tensor& images,
                                const std::vector<int>& labels, std::uint32_t from,
                                std::uint32_t to, std::uint32_t batch = 64) {
  std::uint32_t correct = 0;
  for (std::uint32_t start = from; start < to; start += batch) {
    std::uint32_t bn = std::min(batch, to - start);
    Tensor xb(bn, images.c, images.h, images.w);
    std::size_t per = images.numel() / images.n;
    std::memcpy(xb.data.data(), images.data.data() + std::size_t(start) * per,
                std::size_t(bn) * per * sizeof(float));
    Tensor logits = forward_model(m, xb);
    for (std::uint32_t i = 0; i < bn; ++i) {
      int best = 0;
      for (std::uint32_t c = 1; c < logits.c; ++c)
        if (logits.at(i, c, 0, 0) > logits.at(i, best, 0, 0)) best = int(c);
      if (best == labels[start + i]) ++correct;
    }
  }
  return to > from ? 100.0 * double(correct) / double(to - from) : 0.0;
}

// Trains in place and returns the per-epoch log. Throws DivergedLoss when the
// loss goes non-finite.
inline TrainLog train(Model& m, const SyntheticDataset& ds, const TrainHyper& hyper) {
  TrainLog log;
  std::mt19937_64 shuffle_rng(hyper.seed);
  std::vector<std::uint32_t> order(ds.train_count);
  std::iota(order.begin(), order.end(), 0u);

  auto params = model_trainable_params(m);
  std::map<std::string, std::vector<float>> velocity;
  for (const auto& pv : params) velocity[pv.name].assign(pv.size, 0.f);

  std::size_t per = ds.images.numel() / ds.images.n;

  for (std::uint32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    double lr = hyper.lr * 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(hyper.epochs)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    std::uint32_t loss_batches = 0, correct = 0;
    for (std::uint32_t start = 0; start < ds.train_count; start += hyper.batch) {
      std::uint32_t bn = std::min(hyper.batch, ds.train_count - start);
      Tensor xb(bn, ds.images.c, ds.images.h, ds.images.w);
      std::vector<int> yb(bn);
      for (std::uint32_t i = 0; i < bn; ++i) {
        std::uint32_t src = order[start + i];
        std::memcpy(xb.data.data() + std::size_t(i) * per,
                    ds.images.data.data() + std::size_t(src) * per, per * sizeof(float));
        yb[i] = ds.labels[src];
      }

      Tape<float> tape;
      int xin = tape.constant(xb);
      ModelTrace<float> tr = trace_model(tape, m, xin, /*training=*/true);
      int loss = tape.softmax_cross_entropy(tr.output, yb);
      double lval = double(tape.value(loss).data[0]);
      if (!std::isfinite(lval))
        throw DivergedLoss("loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(start / hyper.batch) + " (lr=" + std::to_string(lr) +
                           ")");
      loss_sum += lval;
      ++loss_batches;

      const Tensor& logits = tape.value(tr.output);
      for (std::uint32_t i = 0; i < bn; ++i) {
        int best = 0;
        for (std::uint32_t c = 1; c < logits.c; ++c)
          if (logits.at(i, c, 0, 0) > logits.at(i, best, 0, 0)) best = int(c);
        if (best == yb[i]) ++correct;
      }

      tape.backward(loss);
      auto grads = tape.gradients();
      for (auto& pv : params) {
        const Tensor& g = grads.at(pv.name);
        auto& vel = velocity[pv.name];
        for (std::size_t i = 0; i < pv.size; ++i) {
          vel[i] = float(hyper.momentum) * vel[i] + g.data[i];
          pv.data[i] -= float(lr) * vel[i];
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_batches ? loss_sum / loss_batches : 0.0;
    rec.train_acc = 100.0 * double(correct) / double(ds.train_count);
    rec.test_acc = evaluate_accuracy(m, ds.images, ds.labels, ds.train_count, ds.size());
    log.epochs.push_back(rec);
  }
  return log;
}

}  // namespace groupnl
