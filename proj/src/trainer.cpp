#include "okd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace okd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

constexpr char kMagic[9] = "OKDCKPT1";  // 8 bytes on disk
constexpr std::uint32_t kVersion = 1;

}  // namespace

SgdOptimizer::SgdOptimizer(std::vector<NamedParam> params, SgdConfig config)
    : params_(std::move(params)), cfg_(config) {
  if (!(cfg_.lr > 0)) fail("sgd: learning rate must be positive");
  momentum_.reserve(params_.size());
  for (const NamedParam& p : params_) {
    momentum_.emplace_back(p.tensor.size(), 0.0);
  }
}

void SgdOptimizer::zero_grad() {
  for (NamedParam& p : params_) p.tensor.zero_grad();
}

void SgdOptimizer::step() {
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    NamedParam& p = params_[pi];
    if (!p.tensor.has_grad()) {
      fail("sgd_step: missing gradient for parameter '" + p.name + "'");
    }
    const std::vector<double>& g = p.tensor.grad();
    std::vector<double>& v = p.tensor.values_mut();
    std::vector<double>& buf = momentum_[pi];
    const double wd = p.decay ? cfg_.weight_decay : 0.0;
    const double mu = cfg_.momentum;
    const double lr = cfg_.lr;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = g[i] + wd * v[i];
      buf[i] = mu * buf[i] + d;
      const double update = cfg_.nesterov ? d + mu * buf[i] : buf[i];
      v[i] -= lr * update;
    }
  }
}

std::vector<NamedArray> SgdOptimizer::momentum_arrays() const {
  std::vector<NamedArray> arrays;
  arrays.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    arrays.push_back({params_[i].name,
                      {momentum_[i].size()},
                      momentum_[i]});
  }
  return arrays;
}

void SgdOptimizer::load_momentum(const std::vector<NamedArray>& arrays) {
  std::map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : arrays) by_name[a.name] = &a;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto it = by_name.find(params_[i].name);
    if (it == by_name.end()) {
      fail("load_momentum: missing buffer for parameter '" + params_[i].name +
           "'");
    }
    if (it->second->values.size() != momentum_[i].size()) {
      fail("load_momentum: size mismatch for '" + params_[i].name + "'");
    }
    momentum_[i] = it->second->values;
  }
}

void Schedule::validate() const {
  if (!(base_lr > 0)) fail("schedule: base lr must be positive");
  if (!(decay > 0)) fail("schedule: decay factor must be positive");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      fail("schedule: milestones must be strictly increasing");
    }
    if (milestones[i] >= total_epochs) {
      fail("schedule: milestone " + std::to_string(milestones[i]) +
           " not below total epochs " + std::to_string(total_epochs));
    }
  }
}

double lr_at(const Schedule& schedule, std::size_t epoch) {
  if (epoch >= schedule.total_epochs) {
    fail("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
         std::to_string(schedule.total_epochs) + ")");
  }
  double lr = schedule.base_lr;
  for (std::size_t m : schedule.milestones) {
    if (epoch >= m) lr *= schedule.decay;
  }
  return lr;
}

LossBreakdown train_epoch(MultiBranchNet& net, AttentionMechanism& attention,
                          const Dataset& train, SgdOptimizer& optimizer,
                          const Coefficients& coeffs, Rng& data_rng,
                          const TrainOptions& options) {
  BatchIterator it(train, options.batch_size);
  it.start_epoch(&data_rng);

  LossBreakdown mean;
  mean.alpha = coeffs.alpha;
  mean.beta = coeffs.beta;
  mean.gamma = coeffs.gamma;
  mean.temperature = coeffs.temperature;

  std::vector<double> buf;
  std::vector<int> labels;
  std::size_t batches = 0;
  while (it.next(buf, labels)) {
    const std::size_t got = labels.size();
    if (options.augment) {
      augment_batch(buf, got, train.channels, train.height, train.width,
                    data_rng, options.augment_pad);
    }
    Tensor x =
        Tensor::from({got, train.channels, train.height, train.width}, buf);
    BranchOutput out = net.forward(x, Mode::Train);
    auto abort_nan = [&](const std::string& component) {
      throw NanLossError(component, "train_epoch: non-finite '" + component +
                                        "' at batch " +
                                        std::to_string(batches));
    };
    auto finite = [](const Tensor& t) {
      for (double v : t.values()) {
        if (!std::isfinite(v)) return false;
      }
      return true;
    };
    for (std::size_t b = 0; b < out.logits.size(); ++b) {
      if (!finite(out.logits[b])) {
        abort_nan("logits[" + std::to_string(b) + "]");
      }
    }
    Tensor weights = attention.weights(out, Mode::Train);
    if (!finite(weights)) abort_nan("fusion_weights");
    std::vector<Tensor> aux(out.logits.begin(), out.logits.end() - 1);
    Tensor target = ensemble_target(weights, aux);
    LossBreakdown bd =
        total_loss(out, labels, target, net.classifier_weights(), coeffs);
    if (auto bad = bd.first_non_finite()) abort_nan(*bad);
    optimizer.zero_grad();
    backward(bd.total_tensor);
    optimizer.step();

    mean.ce_sum += bd.ce_sum;
    mean.kl1 += bd.kl1;
    mean.kl2 += bd.kl2;
    mean.cd += bd.cd;
    mean.total += bd.total;
    ++batches;
  }
  if (batches == 0) fail("train_epoch: empty training split");
  mean.ce_sum /= double(batches);
  mean.kl1 /= double(batches);
  mean.kl2 /= double(batches);
  mean.cd /= double(batches);
  mean.total /= double(batches);
  return mean;
}

// ---------------------------------------------------------------------------
// Checkpointing

namespace {

void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) fail("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void put_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) fail("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::string meta_to_text(const CheckpointMeta& meta) {
  std::ostringstream os;
  os << "epoch=" << meta.epoch << "\n";
  os.precision(17);
  os << "lr=" << meta.lr << "\n";
  os << "seed_init=" << meta.seed_init << "\n";
  os << "seed_shuffle=" << meta.seed_shuffle << "\n";
  for (int i = 0; i < 4; ++i) {
    os << "rng" << i << "=" << meta.data_rng_state[std::size_t(i)] << "\n";
  }
  os << "config_hash=" << meta.config_hash << "\n";
  os << "extra=" << meta.extra << "\n";
  return os.str();
}

CheckpointMeta meta_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) fail("checkpoint: metadata missing key '" + key + "'");
    return it->second;
  };
  CheckpointMeta meta;
  meta.epoch = std::stoull(need("epoch"));
  meta.lr = std::stod(need("lr"));
  meta.seed_init = std::stoull(need("seed_init"));
  meta.seed_shuffle = std::stoull(need("seed_shuffle"));
  for (int i = 0; i < 4; ++i) {
    meta.data_rng_state[std::size_t(i)] =
        std::stoull(need("rng" + std::to_string(i)));
  }
  meta.config_hash = need("config_hash");
  meta.extra = kv.count("extra") ? kv["extra"] : "";
  return meta;
}

void write_checkpoint_file(const std::string& path,
                           const std::vector<NamedArray>& arrays,
                           const CheckpointMeta& meta) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail("checkpoint: cannot open '" + tmp + "' for writing");
    os.write(kMagic, 8);
    put_u32_le(os, kVersion);
    write_arrays(os, arrays);
    const std::string text = meta_to_text(meta);
    put_u64_le(os, text.size());
    os.write(text.data(), std::streamsize(text.size()));
    if (!os) fail("checkpoint: write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedArray> collect_state(MultiBranchNet& net,
                                      AttentionMechanism* attention,
                                      const SgdOptimizer* optimizer) {
  std::vector<NamedArray> arrays;
  auto add_params = [&](std::vector<NamedParam> params) {
    for (NamedParam& p : params) {
      arrays.push_back(
          {"param." + p.name, p.tensor.shape(), p.tensor.values()});
    }
  };
  auto add_buffers = [&](std::vector<NamedBuffer> buffers) {
    for (NamedBuffer& b : buffers) {
      arrays.push_back({"buffer." + b.name, {b.data->size()}, *b.data});
    }
  };
  add_params(net.named_parameters());
  add_buffers(net.named_buffers());
  if (attention) {
    add_params(attention->named_parameters());
    add_buffers(attention->named_buffers());
  }
  if (optimizer) {
    for (NamedArray a : optimizer->momentum_arrays()) {
      a.name = "momentum." + a.name;
      arrays.push_back(std::move(a));
    }
  }
  return arrays;
}

}  // namespace

void save_checkpoint(const std::string& path, MultiBranchNet& net,
                     AttentionMechanism* attention, const SgdOptimizer* optimizer,
                     const CheckpointMeta& meta) {
  write_checkpoint_file(path, collect_state(net, attention, optimizer), meta);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(kMagic, 8)) {
    fail("checkpoint: '" + path + "' has bad magic bytes");
  }
  const std::uint32_t version = get_u32_le(is);
  if (version != kVersion) {
    fail("checkpoint: '" + path + "' has format version " +
         std::to_string(version) + ", expected " + std::to_string(kVersion));
  }
  Checkpoint ck;
  ck.arrays = read_arrays(is);
  const std::uint64_t meta_len = get_u64_le(is);
  std::string text(meta_len, '\0');
  is.read(text.data(), std::streamsize(meta_len));
  if (!is) fail("checkpoint: truncated metadata in '" + path + "'");
  ck.meta = meta_from_text(text);
  return ck;
}

namespace {

void restore_arrays(const std::vector<NamedArray>& arrays,
                    std::vector<NamedParam> params,
                    std::vector<NamedBuffer> buffers, bool need_momentum,
                    SgdOptimizer* optimizer, const char* who) {
  std::map<std::string, const NamedArray*> by_name;
  for (const NamedArray& a : arrays) by_name[a.name] = &a;
  auto lookup = [&](const std::string& name) -> const NamedArray& {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      fail(std::string(who) + ": checkpoint missing array '" + name + "'");
    }
    return *it->second;
  };
  for (NamedParam& p : params) {
    const NamedArray& a = lookup("param." + p.name);
    if (a.shape != p.tensor.shape()) {
      fail(std::string(who) + ": shape mismatch for '" + p.name + "': " +
           shape_str(a.shape) + " vs " + shape_str(p.tensor.shape()));
    }
    p.tensor.values_mut() = a.values;
    p.tensor.zero_grad();
  }
  for (NamedBuffer& b : buffers) {
    const NamedArray& a = lookup("buffer." + b.name);
    if (a.values.size() != b.data->size()) {
      fail(std::string(who) + ": buffer size mismatch for '" + b.name + "'");
    }
    *b.data = a.values;
  }
  if (need_momentum && optimizer) {
    std::vector<NamedArray> moms;
    for (const NamedArray& a : arrays) {
      if (a.name.rfind("momentum.", 0) == 0) {
        moms.push_back({a.name.substr(9), a.shape, a.values});
      }
    }
    optimizer->load_momentum(moms);
  }
}

}  // namespace

void restore_training_state(const Checkpoint& checkpoint, MultiBranchNet& net,
                            AttentionMechanism* attention,
                            SgdOptimizer* optimizer, Rng* data_rng) {
  std::vector<NamedParam> params = net.named_parameters();
  std::vector<NamedBuffer> buffers = net.named_buffers();
  if (attention) {
    for (NamedParam& p : attention->named_parameters()) params.push_back(p);
    for (NamedBuffer& b : attention->named_buffers()) buffers.push_back(b);
  }
  restore_arrays(checkpoint.arrays, std::move(params), std::move(buffers),
                 optimizer != nullptr, optimizer, "restore");
  if (data_rng) data_rng->set_state(checkpoint.meta.data_rng_state);
}

void save_leader_checkpoint(const std::string& path, MultiBranchNet& net,
                            const CheckpointMeta& meta) {
  std::vector<NamedArray> arrays;
  const std::size_t leader = net.config().branches - 1;
  const std::string leader_prefix = "branch." + std::to_string(leader) + ".";
  for (NamedParam& p : net.named_parameters()) {
    std::string name = p.name;
    if (name.rfind("branch.", 0) == 0) {
      if (name.rfind(leader_prefix, 0) != 0) continue;
      name = "leader." + name.substr(leader_prefix.size());
    }
    arrays.push_back({"param." + name, p.tensor.shape(), p.tensor.values()});
  }
  for (NamedBuffer& b : net.named_buffers()) {
    std::string name = b.name;
    if (name.rfind("branch.", 0) == 0) {
      if (name.rfind(leader_prefix, 0) != 0) continue;
      name = "leader." + name.substr(leader_prefix.size());
    }
    arrays.push_back({"buffer." + name, {b.data->size()}, *b.data});
  }
  write_checkpoint_file(path, arrays, meta);
}

StudentNet load_leader_checkpoint(const std::string& path,
                                  const NetConfig& config) {
  Checkpoint ck = read_checkpoint(path);
  StudentNet student = StudentNet::build(config);
  restore_arrays(ck.arrays, student.named_parameters(),
                 student.named_buffers(), false, nullptr, "load_leader");
  return student;
}

}  // namespace okd
