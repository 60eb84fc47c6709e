#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffmorph/data.hpp"
#include "diffmorph/io.hpp"
#include "diffmorph/losses.hpp"
#include "diffmorph/nets.hpp"
#include "diffmorph/schedule.hpp"

namespace diffmorph {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainingConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 2e-4;
    LossWeights weights;
    int T_train = 2000;
    double beta_start = 1e-6;
    double beta_end = 1e-2;
    std::uint64_t seed = 0;
    AugmentFlags augment;
    int checkpoint_interval = 100;  // steps between periodic checkpoints
    std::string data = "data/train";
    std::string checkpoint = "run/model.dmck";
    std::string log = "run/loss.csv";
    std::string resume;  // checkpoint to continue from; empty for a fresh run
    ArchConfig arch;

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
        if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
        try {
            weights.validate();
            arch.validate();
            make_schedule(T_train, beta_start, beta_end);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }

    NoiseSchedule schedule() const { return make_schedule(T_train, beta_start, beta_end); }
    std::string to_text() const;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::string fmt_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& value) {
    N out{};
    const char* end = value.data() + value.size();
    auto res = std::from_chars(value.data(), end, out);
    if (res.ec != std::errc() || res.ptr != end) throw ConfigError("bad value '" + value + "' for " + key);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("bad boolean '" + value + "' for " + key);
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
    if (out.empty()) throw ConfigError("empty list for " + key);
    return out;
}

}  // namespace detail

inline std::string TrainingConfig::to_text() const {
    std::ostringstream os;
    os << "epochs = " << epochs << "\n"
       << "batch_size = " << batch_size << "\n"
       << "learning_rate = " << detail::fmt_double(learning_rate) << "\n"
       << "lambda = " << detail::fmt_double(weights.lambda) << "\n"
       << "lambda_phi = " << detail::fmt_double(weights.lambda_phi) << "\n"
       << "ncc_window = " << weights.ncc_window << "\n"
       << "T_train = " << T_train << "\n"
       << "beta_start = " << detail::fmt_double(beta_start) << "\n"
       << "beta_end = " << detail::fmt_double(beta_end) << "\n"
       << "seed = " << seed << "\n"
       << "hflip = " << (augment.hflip ? "true" : "false") << "\n"
       << "vflip = " << (augment.vflip ? "true" : "false") << "\n"
       << "rot90 = " << (augment.rot90 ? "true" : "false") << "\n"
       << "checkpoint_interval = " << checkpoint_interval << "\n"
       << "data = " << data << "\n"
       << "checkpoint = " << checkpoint << "\n"
       << "log = " << log << "\n"
       << "resume = " << resume << "\n"
       << "score_channels = " << detail::fmt_ints(arch.score_channels) << "\n"
       << "deform_channels = " << detail::fmt_ints(arch.deform_channels) << "\n"
       << "embed_dim = " << arch.embed_dim << "\n"
       << "attention = " << (arch.attention ? "true" : "false") << "\n"
       << "groups = " << arch.groups << "\n";
    return os.str();
}

/// Applies one `key = value` setting; returns false for an unknown key.
inline bool apply_config_key(TrainingConfig& c, const std::string& key, const std::string& v) {
    using detail::parse_bool;
    using detail::parse_number;
    if (key == "epochs") c.epochs = parse_number<int>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, v);
    else if (key == "lambda") c.weights.lambda = parse_number<double>(key, v);
    else if (key == "lambda_phi") c.weights.lambda_phi = parse_number<double>(key, v);
    else if (key == "ncc_window") c.weights.ncc_window = parse_number<int>(key, v);
    else if (key == "T_train") c.T_train = parse_number<int>(key, v);
    else if (key == "beta_start") c.beta_start = parse_number<double>(key, v);
    else if (key == "beta_end") c.beta_end = parse_number<double>(key, v);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "hflip") c.augment.hflip = parse_bool(key, v);
    else if (key == "vflip") c.augment.vflip = parse_bool(key, v);
    else if (key == "rot90") c.augment.rot90 = parse_bool(key, v);
    else if (key == "checkpoint_interval") c.checkpoint_interval = parse_number<int>(key, v);
    else if (key == "data") c.data = v;
    else if (key == "checkpoint") c.checkpoint = v;
    else if (key == "log") c.log = v;
    else if (key == "resume") c.resume = v;
    else if (key == "score_channels") c.arch.score_channels = detail::parse_ints(key, v);
    else if (key == "deform_channels") c.arch.deform_channels = detail::parse_ints(key, v);
    else if (key == "embed_dim") c.arch.embed_dim = parse_number<int>(key, v);
    else if (key == "attention") c.arch.attention = parse_bool(key, v);
    else if (key == "groups") c.arch.groups = parse_number<int>(key, v);
    else return false;
    return true;
}

/// Parses flat `key = value` text with `#` comments. `extra` receives keys the
/// config does not know; when it is null such keys are errors.
inline TrainingConfig parse_config(const std::string& text,
                                   const std::function<bool(const std::string&, const std::string&)>& extra = {}) {
    TrainingConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        try {
            if (!apply_config_key(c, key, value) && !(extra && extra(key, value))) {
                throw ConfigError("unknown key '" + key + "'");
            }
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

inline TrainingConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// Adam with the conventional defaults and bias correction.
class Adam {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    explicit Adam(const ParamStore<float>& params) {
        for (const auto& [name, t] : params.entries()) {
            m_.emplace_back(t.numel(), 0.0f);
            v_.emplace_back(t.numel(), 0.0f);
        }
    }

    void step(ParamStore<float>& params, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        auto& entries = params.entries();
        for (std::size_t k = 0; k < entries.size(); ++k) {
            auto& p = entries[k].second;
            auto data = p.mutable_data();
            const bool has = p.has_grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < data.size(); ++i) {
                const float g = has ? p.grad()[i] : 0.0f;
                m[i] = static_cast<float>(kBeta1 * m[i] + (1.0 - kBeta1) * g);
                v[i] = static_cast<float>(kBeta2 * v[i] + (1.0 - kBeta2) * static_cast<double>(g) * g);
                const double mhat = m[i] / c1, vhat = v[i] / c2;
                data[i] = static_cast<float>(data[i] - lr * mhat / (std::sqrt(vhat) + kEps));
            }
        }
    }

    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }
    const std::vector<std::vector<float>>& first_moments() const { return m_; }
    const std::vector<std::vector<float>>& second_moments() const { return v_; }

private:
    std::vector<std::vector<float>> m_, v_;
    std::uint64_t t_ = 0;
};

/// Generator seeded from (seed, stream, a, b); lets every draw be reproduced
/// from counters alone.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint32_t stream, std::uint64_t a = 0, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                      static_cast<std::uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
}

/// Stacks [C,H,W] tensors into [B,C,H,W].
inline Tensor stack(const std::vector<const Tensor*>& items) {
    if (items.empty()) throw ShapeError("stack: empty batch");
    Shape s = items.front()->shape();
    std::vector<float> out;
    out.reserve(items.size() * items.front()->numel());
    for (const Tensor* t : items) {
        if (t->shape() != s) throw ShapeError("stack: shape mismatch " + shape_str(t->shape()) + " vs " + shape_str(s));
        out.insert(out.end(), t->vec().begin(), t->vec().end());
    }
    s.insert(s.begin(), items.size());
    return Tensor(std::move(s), std::move(out));
}

struct StepLosses {
    double diffusion = 0.0;
    double regist = 0.0;
    double total = 0.0;
};

/// One joint update of both networks on a batch.
template <class Rng>
StepLosses train_step(Model<float>& model, Adam& adam, const std::vector<PairSample>& batch, const NoiseSchedule& sched,
                      const LossWeights& w, double lr, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    std::vector<const Tensor*> ms, fs;
    for (const auto& s : batch) {
        ms.push_back(&s.m);
        fs.push_back(&s.f);
    }
    const Tensor m = stack(ms), f = stack(fs);
    std::uniform_int_distribution<int> pick_t(1, sched.steps());
    std::vector<int> t(batch.size());
    for (auto& v : t) v = pick_t(rng);
    const Tensor eps = Tensor::randn(f.shape(), rng);
    const Tensor x_t = forward_sample(f, t, eps, sched);

    model.params().zero_grad();
    auto terms = total_loss(m, f, x_t, t, eps, model.score(), model.deform(), w);
    StepLosses out{terms.diffusion.item(), terms.regist.item(), terms.total.item()};
    if (!std::isfinite(out.diffusion)) throw NumericalError("non-finite diffusion loss");
    if (!std::isfinite(out.regist)) throw NumericalError("non-finite registration loss");
    if (!std::isfinite(out.total)) throw NumericalError("non-finite total loss");
    terms.total.backward();
    for (const auto& [name, p] : model.params().entries()) {
        if (p.has_grad() && !all_finite<float>(p.grad())) throw NumericalError("non-finite gradient in " + name);
    }
    adam.step(model.params(), lr);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DMCK", u32 version, u32 length + config text, u32 tensor
// count, then per tensor u16 name length, name, u32 rank, u32 extents, f32 data.

inline constexpr char kCheckpointMagic[4] = {'D', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    TrainingConfig config;
    std::uint64_t step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return &t;
        }
        return nullptr;
    }
};

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string text = ck.config.to_text() + "step = " + std::to_string(ck.step) + "\n";
    auto os = detail::open_out(path);
    os.write(kCheckpointMagic, 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        if (name.size() > 0xffff) throw IoError("tensor name too long: " + name);
        detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor_body(os, t);
    }
    if (!os) throw IoError("write failed: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    auto is = detail::open_in(path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a DMCK checkpoint (bad magic)");
    }
    try {
        const auto version = detail::read_le<std::uint32_t>(is);
        if (version != kCheckpointVersion) {
            throw FormatError("unsupported checkpoint version " + std::to_string(version));
        }
        const auto len = detail::read_le<std::uint32_t>(is);
        if (len > (1u << 20)) throw FormatError("implausible config length");
        std::string text(len, '\0');
        if (!is.read(text.data(), len)) throw FormatError("truncated config block");
        Checkpoint ck;
        try {
            ck.config = parse_config(text, [&](const std::string& key, const std::string& value) {
                if (key != "step") return false;
                ck.step = detail::parse_number<std::uint64_t>(key, value);
                return true;
            });
        } catch (const ConfigError& e) {
            throw FormatError(std::string("embedded config: ") + e.what());
        }
        const auto count = detail::read_le<std::uint32_t>(is);
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto nlen = detail::read_le<std::uint16_t>(is);
            std::string name(nlen, '\0');
            if (!is.read(name.data(), nlen)) throw FormatError("truncated tensor name");
            ck.tensors.emplace_back(std::move(name), read_tensor_body(is));
        }
        return ck;
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline Checkpoint make_checkpoint(const TrainingConfig& config, std::uint64_t step, const Model<float>& model,
                                  const Adam* adam) {
    Checkpoint ck{config, step, {}};
    for (const auto& [name, t] : model.params().entries()) ck.tensors.emplace_back(name, t.detach());
    if (adam) {
        const auto& entries = model.params().entries();
        for (std::size_t k = 0; k < entries.size(); ++k) {
            ck.tensors.emplace_back("adam.m." + entries[k].first, Tensor(entries[k].second.shape(), adam->first_moments()[k]));
        }
        for (std::size_t k = 0; k < entries.size(); ++k) {
            ck.tensors.emplace_back("adam.v." + entries[k].first, Tensor(entries[k].second.shape(), adam->second_moments()[k]));
        }
    }
    return ck;
}

/// Copies parameters (and optimizer moments when `adam` is given) out of a
/// checkpoint. Refuses checkpoints built for a different architecture.
inline void restore_checkpoint(const Checkpoint& ck, Model<float>& model, Adam* adam) {
    if (!(ck.config.arch == model.arch())) {
        throw ModelMismatch("checkpoint architecture (score_channels " + detail::fmt_ints(ck.config.arch.score_channels) +
                            ", deform_channels " + detail::fmt_ints(ck.config.arch.deform_channels) +
                            ") does not match the model (score_channels " +
                            detail::fmt_ints(model.arch().score_channels) + ", deform_channels " +
                            detail::fmt_ints(model.arch().deform_channels) + ")");
    }
    model.load_parameters(ck.tensors);
    if (!adam) return;
    const auto& entries = model.params().entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const Tensor* m = ck.find("adam.m." + entries[k].first);
        const Tensor* v = ck.find("adam.v." + entries[k].first);
        if (!m || !v) throw ModelMismatch("checkpoint lacks optimizer state for " + entries[k].first);
        if (m->numel() != entries[k].second.numel() || v->numel() != entries[k].second.numel()) {
            throw ModelMismatch("optimizer state shape mismatch for " + entries[k].first);
        }
        adam->first_moments()[k] = m->vec();
        adam->second_moments()[k] = v->vec();
    }
    adam->set_steps(ck.step);
}

/// Rebuilds a model from a checkpoint for inference.
inline std::unique_ptr<Model<float>> load_model(const std::filesystem::path& path, TrainingConfig* config = nullptr) {
    const Checkpoint ck = read_checkpoint(path);
    auto model = std::make_unique<Model<float>>(ck.config.arch, ck.config.seed);
    restore_checkpoint(ck, *model, nullptr);
    if (config) *config = ck.config;
    return model;
}

struct TrainProgress {
    std::uint64_t step;
    int epoch;
    StepLosses losses;
};

inline std::string log_row(std::uint64_t step, int epoch, const StepLosses& l) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%llu,%d,%.9g,%.9g,%.9g", static_cast<unsigned long long>(step), epoch, l.diffusion,
                  l.regist, l.total);
    return buf;
}

inline constexpr const char* kLossLogHeader = "step,epoch,l_diffusion,l_regist,total";

namespace detail {

inline std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& final_path, std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, ".step%06llu", static_cast<unsigned long long>(step));
    auto p = final_path;
    p.replace_filename(final_path.stem().string() + buf + final_path.extension().string());
    return p;
}

// Keeps the header and the rows with step <= last_step.
inline std::string truncated_log(const std::filesystem::path& path, std::uint64_t last_step) {
    std::ifstream is(path);
    std::string out = std::string(kLossLogHeader) + "\n", line;
    if (!is) return out;
    std::getline(is, line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const std::uint64_t step = std::stoull(line.substr(0, line.find(',')));
        if (step <= last_step) out += line + "\n";
    }
    return out;
}

}  // namespace detail

/// Full training run. Batch order, augmentation, time steps and noise are all
/// derived from (seed, epoch/step) counters, so a resumed run continues the
/// exact sequence of an uninterrupted one. `stop_after` (0 = no limit) ends
/// the run early after that global step, writing the final checkpoint.
inline void train(const TrainingConfig& config, const std::function<void(const TrainProgress&)>& on_step = {},
                  std::uint64_t stop_after = 0) {
    config.validate();
    const auto samples = load_dataset(config.data);
    const NoiseSchedule sched = config.schedule();
    Model<float> model(config.arch, config.seed);
    Adam adam(model.params());
    std::uint64_t step = 0;
    if (!config.resume.empty()) {
        const Checkpoint ck = read_checkpoint(config.resume);
        restore_checkpoint(ck, model, &adam);
        step = ck.step;
    }
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    const std::uint64_t per_epoch = samples.empty() ? 0 : (samples.size() + bs - 1) / bs;
    const std::uint64_t total = per_epoch * static_cast<std::uint64_t>(config.epochs);
    if (samples.empty() && config.epochs > 0) throw IoError("training set " + config.data + " is empty");

    const std::filesystem::path log_path = config.log;
    if (log_path.has_parent_path()) std::filesystem::create_directories(log_path.parent_path());
    const std::string prefix = step > 0 ? detail::truncated_log(log_path, step) : std::string(kLossLogHeader) + "\n";
    std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot write loss log " + log_path.string());
    log << prefix << std::flush;

    std::vector<std::size_t> order;
    std::uint64_t order_epoch = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t end = stop_after ? std::min(total, stop_after) : total;
    while (step < end) {
        const std::uint64_t epoch = step / per_epoch;
        if (epoch != order_epoch) {
            order.resize(samples.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            auto rng = derived_rng(config.seed, 1, epoch);
            std::shuffle(order.begin(), order.end(), rng);
            order_epoch = epoch;
        }
        const std::size_t first = static_cast<std::size_t>(step % per_epoch) * bs;
        std::vector<PairSample> batch;
        for (std::size_t i = first; i < std::min(first + bs, order.size()); ++i) {
            auto arng = derived_rng(config.seed, 2, step, i);
            batch.push_back(augment(samples[order[i]], arng, config.augment));
        }
        auto rng = derived_rng(config.seed, 3, step);
        const StepLosses l = train_step(model, adam, batch, sched, config.weights, config.learning_rate, rng);
        ++step;
        log << log_row(step, static_cast<int>(epoch + 1), l) << "\n" << std::flush;
        if (on_step) on_step({step, static_cast<int>(epoch + 1), l});
        if (step % static_cast<std::uint64_t>(config.checkpoint_interval) == 0 && step != total) {
            write_checkpoint(detail::periodic_checkpoint_path(config.checkpoint, step),
                             make_checkpoint(config, step, model, &adam));
        }
    }
    if (!log) throw IoError("write failed: " + log_path.string());
    write_checkpoint(config.checkpoint, make_checkpoint(config, step, model, &adam));
}

// ---------------------------------------------------------------------------

struct ClassicalResult {
    Tensor field;                    // best field found, [B,2,H,W]
    std::vector<double> best_loss;   // best objective after each iteration
    int iterations = 0;
    bool diverged = false;
};

// The smoothness term alone is stable for step < 1/(8 * lambda_phi); at the
// default weight 0.125 diverges on textured pairs, so stay a bit below it.
inline constexpr double kClassicalStep = 0.1;

/// Gradient descent on the field itself for the registration objective, with
/// no networks involved. m and f are [B,1,H,W] in [-1,1]. The step size
/// multiplies the gradient of the voxel-summed objective. Stops after 50
/// consecutive increases and returns the best field seen.
inline ClassicalResult classical_register(const Tensor& moving, const Tensor& fixed, const LossWeights& w, int iters,
                                          double step_size = kClassicalStep) {
    require_same_shape(moving, fixed, "classical_register");
    if (moving.rank() != 4) throw ShapeError("classical_register: expected [B,1,H,W], got " + shape_str(moving.shape()));
    if (iters < 0) throw std::invalid_argument("classical_register: iters must be >= 0");
    const Shape fshape{moving.dim(0), 2, moving.dim(2), moving.dim(3)};
    const double voxels = static_cast<double>(moving.dim(2) * moving.dim(3));
    std::vector<float> u(shape_numel(fshape), 0.0f);
    ClassicalResult r{Tensor(fshape, u), {}, 0, false};
    double best = std::numeric_limits<double>::infinity(), prev = best;
    int rising = 0;
    for (int it = 0; it <= iters; ++it) {
        Tensor field(fshape, u, true);
        auto loss = registration_loss(moving.detach(), fixed.detach(), field, w);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericalError("classical_register: non-finite objective");
        if (value < best) {
            best = value;
            r.field = Tensor(fshape, u);
        }
        if (it > 0) r.best_loss.push_back(best);
        rising = value > prev ? rising + 1 : 0;
        prev = value;
        if (rising >= 50) {
            r.diverged = true;
            break;
        }
        if (it == iters) break;
        loss.backward();
        const auto g = field.grad();
        for (std::size_t i = 0; i < u.size(); ++i) u[i] -= static_cast<float>(step_size * voxels * g[i]);
        r.iterations = it + 1;
    }
    return r;
}

}  // namespace diffmorph
