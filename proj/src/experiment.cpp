#include "okd/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace okd {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

double json_num(const json& j, const char* key, double fallback) {
  return j.contains(key) ? j.at(key).get<double>() : fallback;
}

void check_keys(const json& j, const std::string& where,
                const std::set<std::string>& allowed,
                std::vector<std::string>& unknown) {
  if (!j.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      unknown.push_back(where + "." + it.key());
    }
  }
}

json eval_to_json(const EvalResult& e) {
  auto num = [](double v) -> json {
    if (std::isnan(v)) return nullptr;
    return v;
  };
  json j;
  j["branch_top1"] = e.branch_top1;
  json top5 = json::array();
  for (double v : e.branch_top5) top5.push_back(num(v));
  j["branch_top5"] = top5;
  j["leader_top1"] = e.leader_top1;
  j["leader_top5"] = num(e.leader_top5);
  j["ensemble_top1"] = e.ensemble_top1;
  j["interrater"] = num(e.interrater);
  j["samples"] = e.samples;
  return j;
}

EvalResult eval_from_json(const json& j) {
  auto num = [](const json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                       : v.get<double>();
  };
  EvalResult e;
  for (const auto& v : j.at("branch_top1")) e.branch_top1.push_back(num(v));
  for (const auto& v : j.at("branch_top5")) e.branch_top5.push_back(num(v));
  e.leader_top1 = j.at("leader_top1").get<double>();
  e.leader_top5 = num(j.at("leader_top5"));
  e.ensemble_top1 = j.at("ensemble_top1").get<double>();
  e.interrater = num(j.at("interrater"));
  e.samples = j.at("samples").get<std::size_t>();
  return e;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    fail(std::string("config parse: ") + e.what());
  }
  std::vector<std::string> unknown;
  check_keys(j, "config",
             {"dataset", "net", "mechanism", "loss", "optim", "schedule",
              "train", "metrics", "output_dir", "ablation"},
             unknown);

  ExperimentConfig cfg;
  try {
    if (j.contains("dataset")) {
      const json& d = j["dataset"];
      check_keys(d, "dataset", {"kind", "path", "subset_train", "synthetic"},
                 unknown);
      cfg.dataset.kind = d.value("kind", cfg.dataset.kind);
      cfg.dataset.path = d.value("path", cfg.dataset.path);
      cfg.dataset.subset_train =
          d.value("subset_train", cfg.dataset.subset_train);
      if (d.contains("synthetic")) {
        const json& s = d["synthetic"];
        check_keys(s, "dataset.synthetic",
                   {"classes", "train_per_class", "test_per_class", "channels",
                    "height", "width", "margin", "noise", "blobs_per_class",
                    "seed"},
                   unknown);
        SyntheticSpec& sp = cfg.dataset.synthetic;
        sp.classes = s.value("classes", sp.classes);
        sp.train_per_class = s.value("train_per_class", sp.train_per_class);
        sp.test_per_class = s.value("test_per_class", sp.test_per_class);
        sp.channels = s.value("channels", sp.channels);
        sp.height = s.value("height", sp.height);
        sp.width = s.value("width", sp.width);
        sp.margin = json_num(s, "margin", sp.margin);
        sp.noise = json_num(s, "noise", sp.noise);
        sp.blobs_per_class = s.value("blobs_per_class", sp.blobs_per_class);
        sp.seed = s.value("seed", sp.seed);
      }
    }
    if (j.contains("net")) {
      const json& n = j["net"];
      check_keys(n, "net", {"branches", "trunk", "branch"}, unknown);
      cfg.net.branches = n.value("branches", cfg.net.branches);
      auto blocks = [&](const char* key) {
        std::vector<BlockSpec> out;
        for (const json& b : n.at(key)) {
          BlockSpec spec;
          spec.channels = b.value("channels", spec.channels);
          spec.pool = b.value("pool", spec.pool);
          out.push_back(spec);
        }
        return out;
      };
      if (n.contains("trunk")) cfg.net.trunk = blocks("trunk");
      if (n.contains("branch")) cfg.net.branch = blocks("branch");
    }
    if (j.contains("mechanism")) {
      cfg.mechanism = attention_kind_from_name(j["mechanism"].get<std::string>());
    }
    if (j.contains("loss")) {
      const json& l = j["loss"];
      check_keys(l, "loss",
                 {"alpha", "beta", "gamma", "temperature", "cd_include_leader",
                  "tavg_include_leader", "ensemble_ce"},
                 unknown);
      cfg.loss.alpha = json_num(l, "alpha", cfg.loss.alpha);
      cfg.loss.beta = json_num(l, "beta", cfg.loss.beta);
      cfg.loss.gamma = json_num(l, "gamma", cfg.loss.gamma);
      cfg.loss.temperature = json_num(l, "temperature", cfg.loss.temperature);
      cfg.loss.cd_include_leader =
          l.value("cd_include_leader", cfg.loss.cd_include_leader);
      cfg.loss.tavg_include_leader =
          l.value("tavg_include_leader", cfg.loss.tavg_include_leader);
      cfg.loss.ensemble_ce = l.value("ensemble_ce", cfg.loss.ensemble_ce);
    }
    if (j.contains("optim")) {
      const json& o = j["optim"];
      check_keys(o, "optim", {"momentum", "weight_decay", "nesterov"}, unknown);
      cfg.optim.momentum = json_num(o, "momentum", cfg.optim.momentum);
      cfg.optim.weight_decay =
          json_num(o, "weight_decay", cfg.optim.weight_decay);
      cfg.optim.nesterov = o.value("nesterov", cfg.optim.nesterov);
    }
    if (j.contains("schedule")) {
      const json& s = j["schedule"];
      check_keys(s, "schedule", {"base_lr", "milestones", "decay"}, unknown);
      cfg.schedule.base_lr = json_num(s, "base_lr", cfg.schedule.base_lr);
      cfg.schedule.decay = json_num(s, "decay", cfg.schedule.decay);
      if (s.contains("milestones")) {
        cfg.schedule.milestones.clear();
        for (const json& m : s["milestones"]) {
          cfg.schedule.milestones.push_back(m.get<std::size_t>());
        }
      }
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      check_keys(t, "train",
                 {"epochs", "batch_size", "eval_interval",
                  "checkpoint_interval", "augment", "augment_pad", "seed_init",
                  "seed_shuffle"},
                 unknown);
      cfg.epochs = t.value("epochs", cfg.epochs);
      cfg.batch_size = t.value("batch_size", cfg.batch_size);
      cfg.eval_interval = t.value("eval_interval", cfg.eval_interval);
      cfg.checkpoint_interval =
          t.value("checkpoint_interval", cfg.checkpoint_interval);
      cfg.augment = t.value("augment", cfg.augment);
      cfg.augment_pad = t.value("augment_pad", cfg.augment_pad);
      cfg.seed_init = t.value("seed_init", cfg.seed_init);
      cfg.seed_shuffle = t.value("seed_shuffle", cfg.seed_shuffle);
    }
    if (j.contains("metrics")) {
      const json& m = j["metrics"];
      check_keys(m, "metrics", {"diversity_all_branches"}, unknown);
      cfg.diversity_all_branches =
          m.value("diversity_all_branches", cfg.diversity_all_branches);
    }
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    if (j.contains("ablation")) {
      const json& a = j["ablation"];
      check_keys(a, "ablation", {"mechanisms", "cd"}, unknown);
      if (a.contains("mechanisms")) {
        cfg.ablation_mechanisms.clear();
        for (const json& m : a["mechanisms"]) {
          cfg.ablation_mechanisms.push_back(
              attention_kind_from_name(m.get<std::string>()));
        }
      }
      if (a.contains("cd")) {
        cfg.ablation_cd.clear();
        for (const json& c : a["cd"]) cfg.ablation_cd.push_back(c.get<bool>());
      }
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(std::string("config parse: ") + e.what());
  }
  if (!unknown.empty()) {
    std::string msg = "config parse: unknown keys:";
    for (const auto& k : unknown) msg += " " + k;
    fail(msg);
  }
  cfg.schedule.total_epochs = cfg.epochs;
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["dataset"]["kind"] = cfg.dataset.kind;
  j["dataset"]["path"] = cfg.dataset.path;
  j["dataset"]["subset_train"] = cfg.dataset.subset_train;
  const SyntheticSpec& sp = cfg.dataset.synthetic;
  j["dataset"]["synthetic"] = {
      {"classes", sp.classes},
      {"train_per_class", sp.train_per_class},
      {"test_per_class", sp.test_per_class},
      {"channels", sp.channels},
      {"height", sp.height},
      {"width", sp.width},
      {"margin", sp.margin},
      {"noise", sp.noise},
      {"blobs_per_class", sp.blobs_per_class},
      {"seed", sp.seed}};
  j["net"]["branches"] = cfg.net.branches;
  auto blocks_json = [](const std::vector<BlockSpec>& blocks) {
    json arr = json::array();
    for (const BlockSpec& b : blocks) {
      arr.push_back({{"channels", b.channels}, {"pool", b.pool}});
    }
    return arr;
  };
  j["net"]["trunk"] = blocks_json(cfg.net.trunk);
  j["net"]["branch"] = blocks_json(cfg.net.branch);
  j["mechanism"] = attention_kind_name(cfg.mechanism);
  j["loss"] = {{"alpha", cfg.loss.alpha},
               {"beta", cfg.loss.beta},
               {"gamma", cfg.loss.gamma},
               {"temperature", cfg.loss.temperature},
               {"cd_include_leader", cfg.loss.cd_include_leader},
               {"tavg_include_leader", cfg.loss.tavg_include_leader},
               {"ensemble_ce", cfg.loss.ensemble_ce}};
  j["optim"] = {{"momentum", cfg.optim.momentum},
                {"weight_decay", cfg.optim.weight_decay},
                {"nesterov", cfg.optim.nesterov}};
  j["schedule"] = {{"base_lr", cfg.schedule.base_lr},
                   {"milestones", cfg.schedule.milestones},
                   {"decay", cfg.schedule.decay}};
  j["train"] = {{"epochs", cfg.epochs},
                {"batch_size", cfg.batch_size},
                {"eval_interval", cfg.eval_interval},
                {"checkpoint_interval", cfg.checkpoint_interval},
                {"augment", cfg.augment},
                {"augment_pad", cfg.augment_pad},
                {"seed_init", cfg.seed_init},
                {"seed_shuffle", cfg.seed_shuffle}};
  j["metrics"] = {{"diversity_all_branches", cfg.diversity_all_branches}};
  j["output_dir"] = cfg.output_dir;
  json mechs = json::array();
  for (AttentionKind k : cfg.ablation_mechanisms) {
    mechs.push_back(attention_kind_name(k));
  }
  j["ablation"] = {{"mechanisms", mechs}, {"cd", cfg.ablation_cd}};
  return j.dump(2);
}

namespace {

std::size_t dataset_classes(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == "cifar10") return 10;
  if (cfg.dataset.kind == "cifar100") return 100;
  return cfg.dataset.synthetic.classes;
}

void dataset_dims(const ExperimentConfig& cfg, std::size_t& ch, std::size_t& h,
                  std::size_t& w) {
  if (cfg.dataset.kind == "synthetic") {
    ch = cfg.dataset.synthetic.channels;
    h = cfg.dataset.synthetic.height;
    w = cfg.dataset.synthetic.width;
  } else {
    ch = 3;
    h = 32;
    w = 32;
  }
}

std::string cifar_dir(const ExperimentConfig& cfg) {
  if (!cfg.dataset.path.empty()) return cfg.dataset.path;
  if (const char* env = std::getenv("OKD_DATA_ROOT")) return env;
  return "";
}

NetConfig resolved_net_config(const ExperimentConfig& cfg) {
  NetConfig net = cfg.net;
  net.num_classes = dataset_classes(cfg);
  dataset_dims(cfg, net.in_channels, net.height, net.width);
  return net;
}

std::size_t expected_train_size(const ExperimentConfig& cfg) {
  std::size_t n = 0;
  if (cfg.dataset.kind == "synthetic") {
    n = cfg.dataset.synthetic.classes * cfg.dataset.synthetic.train_per_class;
  } else {
    n = 50000;
  }
  if (cfg.dataset.subset_train > 0 && cfg.dataset.subset_train < n) {
    n = cfg.dataset.subset_train;
  }
  return n;
}

}  // namespace

std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> errs;
  auto bad = [&](const std::string& msg) { errs.push_back(msg); };

  if (cfg.dataset.kind != "synthetic" && cfg.dataset.kind != "cifar10" &&
      cfg.dataset.kind != "cifar100") {
    bad("dataset.kind: '" + cfg.dataset.kind +
        "' is not one of synthetic|cifar10|cifar100");
  } else if (cfg.dataset.kind != "synthetic") {
    const std::string dir = cifar_dir(cfg);
    if (dir.empty()) {
      bad("dataset.path: empty and OKD_DATA_ROOT is unset");
    } else if (!fs::exists(dir)) {
      bad("dataset.path: directory '" + dir + "' does not exist");
    }
  } else {
    const SyntheticSpec& sp = cfg.dataset.synthetic;
    if (sp.classes < 2) bad("dataset.synthetic.classes: need >= 2");
    if (sp.train_per_class == 0) bad("dataset.synthetic.train_per_class: need >= 1");
    if (sp.test_per_class == 0) bad("dataset.synthetic.test_per_class: need >= 1");
    if (sp.channels == 0 || sp.height == 0 || sp.width == 0) {
      bad("dataset.synthetic: zero image dimension");
    }
    if (sp.margin < 0) bad("dataset.synthetic.margin: must be >= 0");
    if (sp.noise < 0) bad("dataset.synthetic.noise: must be >= 0");
  }

  try {
    resolved_net_config(cfg).validate();
  } catch (const Error& e) {
    bad(std::string("net: ") + e.what());
  }

  if (cfg.loss.alpha < 0) bad("loss.alpha: must be >= 0");
  if (cfg.loss.beta < 0) bad("loss.beta: must be >= 0");
  if (cfg.loss.gamma < 0) bad("loss.gamma: must be >= 0");
  if (!(cfg.loss.temperature > 0)) bad("loss.temperature: must be > 0");

  if (cfg.optim.momentum < 0 || cfg.optim.momentum >= 1) {
    bad("optim.momentum: must lie in [0, 1)");
  }
  if (cfg.optim.weight_decay < 0) bad("optim.weight_decay: must be >= 0");

  Schedule sched = cfg.schedule;
  sched.total_epochs = cfg.epochs;
  try {
    sched.validate();
  } catch (const Error& e) {
    bad(std::string("schedule: ") + e.what());
  }

  if (cfg.batch_size < 2) bad("train.batch_size: must be >= 2");
  if (cfg.eval_interval == 0) bad("train.eval_interval: must be >= 1");
  if (cfg.checkpoint_interval == 0) bad("train.checkpoint_interval: must be >= 1");
  if (errs.empty() && cfg.batch_size >= 2 &&
      expected_train_size(cfg) % cfg.batch_size == 1) {
    bad("train.batch_size: leaves a final batch of size 1, which batchnorm "
        "rejects in train mode");
  }
  if (cfg.output_dir.empty()) bad("output_dir: must not be empty");
  if (cfg.ablation_mechanisms.empty()) bad("ablation.mechanisms: empty");
  if (cfg.ablation_cd.empty()) bad("ablation.cd: empty");
  return errs;
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = config_to_json(cfg);
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string metrics_record_to_json(const MetricsRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = {{"ce_sum", r.losses.ce_sum},
               {"kl1", r.losses.kl1},
               {"kl2", r.losses.kl2},
               {"cd", r.losses.cd},
               {"total", r.losses.total}};
  j["eval"] = r.eval ? eval_to_json(*r.eval) : json(nullptr);
  j["wall_seconds"] = r.wall_seconds;
  j["config_hash"] = r.config_hash;
  return j.dump();
}

MetricsRecord metrics_record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const std::exception& e) {
    fail(std::string("metrics parse: ") + e.what());
  }
  MetricsRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.lr = j.at("lr").get<double>();
  const json& l = j.at("loss");
  r.losses.ce_sum = l.at("ce_sum").get<double>();
  r.losses.kl1 = l.at("kl1").get<double>();
  r.losses.kl2 = l.at("kl2").get<double>();
  r.losses.cd = l.at("cd").get<double>();
  r.losses.total = l.at("total").get<double>();
  if (!j.at("eval").is_null()) r.eval = eval_from_json(j.at("eval"));
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

std::pair<Dataset, Dataset> load_experiment_dataset(
    const ExperimentConfig& cfg) {
  std::pair<Dataset, Dataset> pair;
  if (cfg.dataset.kind == "synthetic") {
    pair = synthetic_dataset(cfg.dataset.synthetic);
  } else {
    const CifarVariant variant = cfg.dataset.kind == "cifar10"
                                     ? CifarVariant::Cifar10
                                     : CifarVariant::Cifar100;
    pair = load_cifar(cifar_dir(cfg), variant);
  }
  if (cfg.dataset.subset_train > 0 &&
      cfg.dataset.subset_train < pair.first.size()) {
    Dataset& train = pair.first;
    const std::size_t n = cfg.dataset.subset_train;
    train.images.resize(n * train.image_size());
    train.labels.resize(n);
  }
  return pair;
}

RunResult run_experiment(const ExperimentConfig& cfg,
                         const std::string& resume_path) {
  {
    const auto errs = validate_config(cfg);
    if (!errs.empty()) {
      std::string msg = "invalid config:";
      for (const auto& e : errs) msg += "\n  - " + e;
      fail(msg);
    }
  }
  const std::string hash = config_hash(cfg);
  const fs::path run_dir(cfg.output_dir);
  fs::create_directories(run_dir);

  const fs::path hash_file = run_dir / "config_hash.txt";
  if (fs::exists(hash_file)) {
    std::ifstream is(hash_file);
    std::string existing;
    is >> existing;
    if (existing != hash) {
      fail("output dir '" + cfg.output_dir +
           "' already holds artifacts of a different config (hash " +
           existing + " vs " + hash + ")");
    }
  } else {
    std::ofstream os(hash_file);
    os << hash << "\n";
  }
  {
    std::ofstream os(run_dir / "config.json");
    os << config_to_json(cfg) << "\n";
  }

  auto [train_ds, test_ds] = load_experiment_dataset(cfg);
  NetConfig net_cfg = resolved_net_config(cfg);

  Rng init_rng(cfg.seed_init);
  MultiBranchNet net = MultiBranchNet::build(net_cfg, init_rng);
  auto attention = make_attention(cfg.mechanism, net, init_rng);

  std::vector<NamedParam> params = net.named_parameters();
  for (NamedParam& p : attention->named_parameters()) params.push_back(p);
  SgdConfig optim_cfg = cfg.optim;
  optim_cfg.lr = cfg.schedule.base_lr;
  SgdOptimizer optimizer(std::move(params), optim_cfg);

  Schedule schedule = cfg.schedule;
  schedule.total_epochs = cfg.epochs;

  Rng data_rng(cfg.seed_shuffle);
  std::size_t start_epoch = 0;
  if (!resume_path.empty()) {
    Checkpoint ck = read_checkpoint(resume_path);
    if (ck.meta.config_hash != hash) {
      fail("resume: checkpoint belongs to config " + ck.meta.config_hash +
           ", not " + hash);
    }
    restore_training_state(ck, net, attention.get(), &optimizer, &data_rng);
    start_epoch = ck.meta.epoch;
  }

  const fs::path metrics_path = run_dir / "metrics.jsonl";
  std::ofstream metrics(metrics_path, start_epoch == 0
                                          ? std::ios::trunc
                                          : std::ios::app);
  if (!metrics) fail("cannot open metrics file " + metrics_path.string());

  auto make_meta = [&](std::size_t completed, double lr) {
    CheckpointMeta meta;
    meta.epoch = completed;
    meta.lr = lr;
    meta.seed_init = cfg.seed_init;
    meta.seed_shuffle = cfg.seed_shuffle;
    meta.data_rng_state = data_rng.state();
    meta.config_hash = hash;
    json extra;
    extra["net"] = json::parse(config_to_json(cfg))["net"];
    extra["classes"] = net_cfg.num_classes;
    meta.extra = extra.dump();
    return meta;
  };

  RunResult result;
  result.run_dir = cfg.output_dir;
  result.hash = hash;

  TrainOptions topt;
  topt.batch_size = cfg.batch_size;
  topt.augment = cfg.augment;
  topt.augment_pad = cfg.augment_pad;

  EvalOptions eopt;
  eopt.batch_size = std::max<std::size_t>(cfg.batch_size, 64);
  eopt.diversity_all_branches = cfg.diversity_all_branches;

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(schedule, epoch);
    optimizer.set_lr(lr);
    const auto t0 = std::chrono::steady_clock::now();
    LossBreakdown bd = train_epoch(net, *attention, train_ds, optimizer,
                                   cfg.loss, data_rng, topt);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.losses = bd;
    rec.losses.total_tensor = Tensor();  // keep records graph-free
    rec.wall_seconds = wall;
    rec.config_hash = hash;
    if ((epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs) {
      rec.eval = evaluate(net, test_ds, eopt);
    }
    metrics << metrics_record_to_json(rec) << "\n";
    metrics.flush();
    result.records.push_back(rec);

    if ((epoch + 1) % cfg.checkpoint_interval == 0 || epoch + 1 == cfg.epochs) {
      save_checkpoint((run_dir / "last.ckpt").string(), net, attention.get(),
                      &optimizer, make_meta(epoch + 1, lr));
    }
  }

  const double final_lr =
      cfg.epochs > 0 ? lr_at(schedule, cfg.epochs - 1) : schedule.base_lr;
  save_checkpoint((run_dir / "final.ckpt").string(), net, attention.get(),
                  &optimizer, make_meta(cfg.epochs, final_lr));
  save_leader_checkpoint((run_dir / "leader_final.ckpt").string(), net,
                         make_meta(cfg.epochs, final_lr));
  if (!result.records.empty() && result.records.back().eval) {
    result.final_eval = *result.records.back().eval;
  }
  return result;
}

AblationTable run_ablation(const ExperimentConfig& cfg) {
  {
    const auto errs = validate_config(cfg);
    if (!errs.empty()) {
      std::string msg = "invalid config:";
      for (const auto& e : errs) msg += "\n  - " + e;
      fail(msg);
    }
  }
  fs::create_directories(cfg.output_dir);
  AblationTable table;
  for (AttentionKind mech : cfg.ablation_mechanisms) {
    for (bool cd : cfg.ablation_cd) {
      AblationCell cell;
      cell.mechanism = mech;
      cell.cd = cd;
      ExperimentConfig cell_cfg = cfg;
      cell_cfg.mechanism = mech;
      cell_cfg.loss.gamma = cd ? cfg.loss.gamma : 0.0;
      cell_cfg.output_dir = cfg.output_dir + "/cell_" +
                            attention_kind_name(mech) +
                            (cd ? "_cd" : "_nocd");
      try {
        RunResult res = run_experiment(cell_cfg);
        cell.eval = res.final_eval;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      table.cells.push_back(std::move(cell));
    }
  }

  const fs::path csv = fs::path(cfg.output_dir) / "ablation.csv";
  std::ofstream os(csv);
  os << "mechanism,cd,leader_top1,leader_top5,ensemble_top1,interrater,status\n";
  for (const AblationCell& c : table.cells) {
    os << attention_kind_name(c.mechanism) << "," << (c.cd ? 1 : 0) << ",";
    if (c.ok) {
      os << fmt_double(c.eval.leader_top1) << ","
         << fmt_double(c.eval.leader_top5) << ","
         << fmt_double(c.eval.ensemble_top1) << ","
         << fmt_double(c.eval.interrater) << ",ok\n";
    } else {
      os << ",,,,failed: " << c.error << "\n";
    }
  }
  table.csv_path = csv.string();
  return table;
}

namespace {

std::vector<MetricsRecord> read_metrics_jsonl(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail("export: cannot open " + path.string());
  std::vector<MetricsRecord> records;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) records.push_back(metrics_record_from_json(line));
  }
  return records;
}

}  // namespace

std::string export_metrics(const std::string& run_dir,
                           const std::string& format) {
  const fs::path dir(run_dir);
  if (!fs::exists(dir / "metrics.jsonl")) {
    fail("export: no metrics.jsonl under '" + run_dir + "'");
  }
  const auto records = read_metrics_jsonl(dir / "metrics.jsonl");

  if (format == "json") {
    const fs::path out = dir / "metrics.json";
    std::ofstream os(out);
    os << "[\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
      os << "  " << metrics_record_to_json(records[i])
         << (i + 1 < records.size() ? ",\n" : "\n");
    }
    os << "]\n";
    return out.string();
  }
  if (format != "csv") fail("export: unknown format '" + format + "'");

  std::size_t branches = 0;
  for (const auto& r : records) {
    if (r.eval) branches = r.eval->branch_top1.size();
  }
  const fs::path out = dir / "metrics.csv";
  std::ofstream os(out);
  os << "# one row per epoch; empty eval cells mean no evaluation that epoch\n";
  os << "epoch,lr,ce_sum,kl1,kl2,cd,total,wall_seconds,config_hash,"
        "samples,leader_top1,leader_top5,ensemble_top1,interrater";
  for (std::size_t b = 0; b < branches; ++b) os << ",branch" << b << "_top1";
  for (std::size_t b = 0; b < branches; ++b) os << ",branch" << b << "_top5";
  os << "\n";
  for (const auto& r : records) {
    os << r.epoch << "," << fmt_double(r.lr) << ","
       << fmt_double(r.losses.ce_sum) << "," << fmt_double(r.losses.kl1) << ","
       << fmt_double(r.losses.kl2) << "," << fmt_double(r.losses.cd) << ","
       << fmt_double(r.losses.total) << "," << fmt_double(r.wall_seconds)
       << "," << r.config_hash << ",";
    if (r.eval) {
      os << r.eval->samples << "," << fmt_double(r.eval->leader_top1) << ","
         << fmt_double(r.eval->leader_top5) << ","
         << fmt_double(r.eval->ensemble_top1) << ","
         << fmt_double(r.eval->interrater);
      for (std::size_t b = 0; b < branches; ++b) {
        os << "," << fmt_double(r.eval->branch_top1[b]);
      }
      for (std::size_t b = 0; b < branches; ++b) {
        os << "," << fmt_double(r.eval->branch_top5[b]);
      }
    } else {
      os << ",,,,";
      for (std::size_t b = 0; b < 2 * branches; ++b) os << ",";
    }
    os << "\n";
  }
  return out.string();
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("read_metrics_csv: cannot open '" + path + "'");
  std::string line;
  std::getline(is, line);  // comment header
  if (!std::getline(is, line)) fail("read_metrics_csv: missing column header");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  std::size_t branches = 0;
  for (const auto& c : cols) {
    if (c.rfind("branch", 0) == 0 && c.find("_top1") != std::string::npos) {
      ++branches;
    }
  }
  std::vector<MetricsRecord> records;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) f.push_back(c);
    f.resize(cols.size());
    MetricsRecord r;
    r.epoch = std::stoull(f[0]);
    r.lr = std::stod(f[1]);
    r.losses.ce_sum = std::stod(f[2]);
    r.losses.kl1 = std::stod(f[3]);
    r.losses.kl2 = std::stod(f[4]);
    r.losses.cd = std::stod(f[5]);
    r.losses.total = std::stod(f[6]);
    r.wall_seconds = std::stod(f[7]);
    r.config_hash = f[8];
    if (!f[9].empty()) {
      EvalResult e;
      e.samples = std::stoull(f[9]);
      e.leader_top1 = std::stod(f[10]);
      e.leader_top5 = std::stod(f[11]);
      e.ensemble_top1 = std::stod(f[12]);
      e.interrater = std::stod(f[13]);
      for (std::size_t b = 0; b < branches; ++b) {
        e.branch_top1.push_back(std::stod(f[14 + b]));
      }
      for (std::size_t b = 0; b < branches; ++b) {
        e.branch_top5.push_back(std::stod(f[14 + branches + b]));
      }
      r.eval = e;
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace okd
