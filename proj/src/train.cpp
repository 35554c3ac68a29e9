#include "nflr/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "nflr/error.hpp"
#include "nflr/roc.hpp"

namespace nflr {

void TrainConfig::validate() const {
    if (batch_size < 1) throw Error(ErrorKind::config, "batch_size must be >= 1");
    if (!(validation_split > 0.0 && validation_split < 1.0)) {
        throw Error(ErrorKind::config, "validation_split must lie in (0, 1)");
    }
    if (!(adam.learning_rate > 0.0)) throw Error(ErrorKind::config, "learning_rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw Error(ErrorKind::config, "Adam betas must lie in [0, 1)");
    }
    if (!(adam.epsilon > 0.0)) throw Error(ErrorKind::config, "Adam epsilon must be > 0");
    if (threads < 1) throw Error(ErrorKind::config, "threads must be >= 1");
}

Standardizer fit_standardizer(const ModelConfig& cfg, std::span<const TrainSample> samples,
                              std::span<const std::size_t> indices) {
    const std::size_t cells = cfg.grid_height * cfg.grid_width;
    Standardizer st = Standardizer::identity(cfg);
    for (std::size_t c = 0; c < cfg.cnn_channels_in; ++c) {
        double sum = 0.0, sq = 0.0;
        std::size_t n = 0;
        for (auto i : indices) {
            const auto& ex = samples[i].example;
            for (std::size_t k = c * cells; k < (c + 1) * cells; ++k) {
                if (!ex.empty.empty() && ex.empty[k]) continue;
                sum += ex.maps[k];
                ++n;
            }
        }
        if (n == 0) continue;
        const double mean = sum / static_cast<double>(n);
        for (auto i : indices) {
            const auto& ex = samples[i].example;
            for (std::size_t k = c * cells; k < (c + 1) * cells; ++k) {
                if (!ex.empty.empty() && ex.empty[k]) continue;
                sq += (ex.maps[k] - mean) * (ex.maps[k] - mean);
            }
        }
        const double sd = n > 1 ? std::sqrt(sq / static_cast<double>(n - 1)) : 0.0;
        st.map_mean[c] = mean;
        st.map_sd[c] = sd > 0.0 ? sd : 1.0;
    }
    for (std::size_t f = 0; f < cfg.fcn_inputs; ++f) {
        double sum = 0.0, sq = 0.0;
        for (auto i : indices) sum += samples[i].example.scalars.at(f);
        const double n = static_cast<double>(indices.size());
        const double mean = sum / n;
        for (auto i : indices) sq += std::pow(samples[i].example.scalars[f] - mean, 2);
        const double sd = indices.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
        st.scalar_mean[f] = mean;
        st.scalar_sd[f] = sd > 0.0 ? sd : 1.0;
    }
    return st;
}

std::pair<double, double> evaluate_loss(const HybridModel& model, std::span<const TrainSample> samples,
                                        std::span<const std::size_t> indices) {
    if (indices.empty()) return {0.0, 0.0};
    double loss = 0.0;
    std::size_t correct = 0;
    for (auto i : indices) {
        const auto& ex = samples[i].example;
        const double p = forward(model, ex);
        loss += bce_loss(p, ex.label);
        correct += (p >= 0.5) == (ex.label == 1);
    }
    const double n = static_cast<double>(indices.size());
    return {loss / n, static_cast<double>(correct) / n};
}

namespace {

struct SampleOutcome {
    double loss = 0.0;
    double probability = 0.0;
};

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const TrainSample> samples,
                  std::uint64_t seed) {
    model_cfg.validate();
    cfg.validate();
    if (samples.empty()) throw Error(ErrorKind::config, "training set is empty");
    std::size_t n_pos = 0;
    for (const auto& s : samples) n_pos += s.example.label == 1;
    if (n_pos == 0 || n_pos == samples.size()) {
        throw Error(ErrorKind::config, "training data contains a single class");
    }

    // Subject-wise validation carve-out, stratified by label.
    std::vector<SubjectRef> refs;
    refs.reserve(samples.size());
    for (const auto& s : samples) refs.push_back({s.subject, s.example.label});
    const auto split = subject_split(refs, 1.0 - cfg.validation_split, derive_seed(seed, {0x7a11dULL}));
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        (split.of(samples[i].subject) == Fold::train ? train_idx : val_idx).push_back(i);
    }

    TrainResult result;
    for (const auto& [id, fold] : split.fold) {
        if (fold == Fold::test) result.validation_subjects.push_back(id);
    }
    result.model = HybridModel::initialized(model_cfg, derive_seed(seed, {0x1417ULL}));
    result.model.standardizer = fit_standardizer(model_cfg, samples, train_idx);
    // Inputs are fixed for the whole run, so each sample is standardized once.
    auto& model = result.model;
    std::vector<NetInput> inputs;
    inputs.reserve(samples.size());
    for (const auto& s : samples) inputs.push_back(prepare_input(model, s.example));

    const std::size_t n_params = model.params.size();
    const std::size_t workers = std::min(cfg.threads, cfg.batch_size);
    std::vector<std::vector<double>> sample_grads(cfg.batch_size, std::vector<double>(n_params));
    std::vector<SampleOutcome> outcomes(cfg.batch_size);
    std::vector<ForwardCache> caches(workers);
    std::vector<double> batch_grad(n_params);
    AdamState adam(n_params);

    auto run_sample = [&](std::size_t slot, std::size_t sample, std::size_t worker) {
        auto& cache = caches[worker];
        cache.input = inputs[sample];
        forward_cached(model, cache);
        const int label = samples[sample].example.label;
        outcomes[slot].loss = backward(model, cache, label, sample_grads[slot]);
        outcomes[slot].probability = cache.probability;
    };

    std::vector<std::size_t> order = train_idx;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, {0x5e0cULL, epoch}));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - start);
            if (workers <= 1) {
                for (std::size_t b = 0; b < count; ++b) run_sample(b, order[start + b], 0);
            } else {
                std::vector<std::jthread> pool;
                for (std::size_t w = 0; w < workers; ++w) {
                    pool.emplace_back([&, w] {
                        for (std::size_t b = w; b < count; b += workers) run_sample(b, order[start + b], w);
                    });
                }
            }
            // Fixed reduction order: sample slot 0, 1, 2, ...
            std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
            for (std::size_t b = 0; b < count; ++b) {
                const auto& g = sample_grads[b];
                for (std::size_t k = 0; k < n_params; ++k) batch_grad[k] += g[k];
                loss_sum += outcomes[b].loss;
                correct += (outcomes[b].probability >= 0.5) == (samples[order[start + b]].example.label == 1);
            }
            const double inv = 1.0 / static_cast<double>(count);
            for (auto& g : batch_grad) g *= inv;
            adam_step(model.params, batch_grad, adam, cfg.adam);
        }
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_sum / static_cast<double>(order.size());
        st.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
        std::tie(st.val_loss, st.val_acc) = evaluate_loss(model, samples, val_idx);
        result.history.push_back(st);
    }
    return result;
}

std::string history_to_csv(const std::vector<EpochStats>& history) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,val_loss,train_acc,val_acc\n";
    for (const auto& h : history) {
        os << h.epoch << ',' << h.train_loss << ',' << h.val_loss << ',' << h.train_acc << ',' << h.val_acc << '\n';
    }
    return os.str();
}

}  // namespace nflr
