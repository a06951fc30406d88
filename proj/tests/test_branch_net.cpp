#include <map>

#include "doctest.h"
#include "okd/branch_net.hpp"

using namespace okd;

namespace {

NetConfig tiny_config(std::size_t branches = 2) {
  NetConfig cfg;
  cfg.num_classes = 3;
  cfg.branches = branches;
  cfg.trunk = {{4, true}};
  cfg.branch = {{6, false}};
  cfg.in_channels = 2;
  cfg.height = 8;
  cfg.width = 8;
  return cfg;
}

std::vector<double> all_param_values(MultiBranchNet& net) {
  std::vector<double> out;
  for (NamedParam& p : net.named_parameters()) {
    const auto& v = p.tensor.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace

TEST_CASE("structure: auxiliaries plus one group leader") {
  auto m2 = MultiBranchNet::build(tiny_config(2), 1);
  CHECK(m2.branch_param_count(0) == m2.branch_param_count(1));

  auto m4 = MultiBranchNet::build(tiny_config(4), 1);
  Rng rng(5);
  Tensor batch = Tensor::randn({2, 2, 8, 8}, rng);
  BranchOutput out = m4.forward(batch, Mode::Train);
  CHECK(out.logits.size() == 4);    // 3 auxiliaries + leader
  CHECK(out.features.size() == 3);  // auxiliary feature maps only
  for (const Tensor& t : out.logits) CHECK(t.shape() == Shape{2, 3});
  for (const Tensor& f : out.features) CHECK(f.shape() == Shape{2, 6, 4, 4});
  CHECK(out.trunk_mid.shape() == Shape{2, 4, 4, 4});
}

TEST_CASE("build determinism") {
  auto a = MultiBranchNet::build(tiny_config(), 99);
  auto b = MultiBranchNet::build(tiny_config(), 99);
  auto c = MultiBranchNet::build(tiny_config(), 100);
  CHECK(all_param_values(a) == all_param_values(b));
  CHECK(all_param_values(a) != all_param_values(c));
}

TEST_CASE("zero input and zero parameters give equal branch logits") {
  auto net = MultiBranchNet::build(tiny_config(3), 1);
  for (NamedParam& p : net.named_parameters()) {
    std::fill(p.tensor.values_mut().begin(), p.tensor.values_mut().end(), 0.0);
  }
  Tensor batch = Tensor::zeros({2, 2, 8, 8});
  BranchOutput out = net.forward(batch, Mode::Eval);
  for (std::size_t b = 1; b < out.logits.size(); ++b) {
    CHECK(out.logits[b].values() == out.logits[0].values());
  }
}

TEST_CASE("branches with copied parameters produce identical outputs") {
  auto net = MultiBranchNet::build(tiny_config(3), 7);
  auto& branches = net.branches();
  // copy branch 0 parameters into branch 1
  auto copy_tensor = [](const Tensor& src, Tensor dst) {
    dst.values_mut() = src.values();
  };
  for (std::size_t blk = 0; blk < branches[0].blocks.size(); ++blk) {
    copy_tensor(branches[0].blocks[blk].conv1.weight,
                branches[1].blocks[blk].conv1.weight);
    copy_tensor(branches[0].blocks[blk].conv2.weight,
                branches[1].blocks[blk].conv2.weight);
    copy_tensor(branches[0].blocks[blk].bn1.gamma,
                branches[1].blocks[blk].bn1.gamma);
    copy_tensor(branches[0].blocks[blk].bn1.beta,
                branches[1].blocks[blk].bn1.beta);
    copy_tensor(branches[0].blocks[blk].bn2.gamma,
                branches[1].blocks[blk].bn2.gamma);
    copy_tensor(branches[0].blocks[blk].bn2.beta,
                branches[1].blocks[blk].bn2.beta);
  }
  copy_tensor(branches[0].classifier.weight, branches[1].classifier.weight);
  copy_tensor(branches[0].classifier.bias, branches[1].classifier.bias);

  Rng rng(8);
  BranchOutput out = net.forward(Tensor::randn({2, 2, 8, 8}, rng), Mode::Train);
  CHECK(out.logits[0].values() == out.logits[1].values());
  CHECK(out.features[0].values() == out.features[1].values());
}

TEST_CASE("gradient isolation between branches") {
  auto net = MultiBranchNet::build(tiny_config(3), 11);
  Rng rng(4);
  Tensor batch = Tensor::randn({2, 2, 8, 8}, rng);

  // a loss touching only branch 0 leaves branch 1 parameters without grads
  BranchOutput out = net.forward(batch, Mode::Train);
  backward(sum(out.logits[0]));
  CHECK(net.branches()[0].classifier.weight.has_grad());
  CHECK(!net.branches()[1].classifier.weight.has_grad());
  CHECK(net.trunk()[0].conv1.weight.has_grad());  // trunk feeds every branch
  for (NamedParam& p : net.named_parameters()) p.tensor.zero_grad();

  // perturbing branch 1 changes only branch 1 outputs
  BranchOutput before = net.forward(batch, Mode::Eval);
  net.branches()[1].classifier.bias.values_mut()[0] += 1.0;
  BranchOutput after = net.forward(batch, Mode::Eval);
  CHECK(before.logits[0].values() == after.logits[0].values());
  CHECK(before.logits[2].values() == after.logits[2].values());
  CHECK(before.logits[1].values() != after.logits[1].values());
  CHECK(before.features[1].values() == after.features[1].values());
}

TEST_CASE("config validation") {
  NetConfig cfg = tiny_config();
  cfg.branches = 1;
  CHECK_THROWS_WITH_AS(MultiBranchNet::build(cfg, 1),
                       doctest::Contains("2 branches"), Error);
  cfg = tiny_config();
  cfg.num_classes = 1;
  CHECK_THROWS_WITH_AS(MultiBranchNet::build(cfg, 1),
                       doctest::Contains("2 classes"), Error);
  cfg = tiny_config();
  cfg.branch.clear();
  CHECK_THROWS_WITH_AS(MultiBranchNet::build(cfg, 1),
                       doctest::Contains("branch block"), Error);
  cfg = tiny_config();
  cfg.trunk[0].channels = 0;
  CHECK_THROWS_WITH_AS(MultiBranchNet::build(cfg, 1),
                       doctest::Contains("zero-channel"), Error);
  cfg = tiny_config();
  cfg.height = 6;  // 6 -> 3 after the trunk pool, then branch pooling fails
  cfg.branch[0].pool = true;
  CHECK_THROWS_WITH_AS(MultiBranchNet::build(cfg, 1), doctest::Contains("pool"),
                       Error);

  auto net = MultiBranchNet::build(tiny_config(), 1);
  CHECK_THROWS_WITH_AS(net.forward(Tensor::zeros({1, 2, 4, 4}), Mode::Eval),
                       doctest::Contains("does not match"), Error);
}

TEST_CASE("student net replays the leader path bitwise") {
  NetConfig cfg = tiny_config(4);
  auto net = MultiBranchNet::build(cfg, 21);
  StudentNet student = StudentNet::build(cfg);

  // pair full-net arrays with the student layout by name
  const std::string leader_prefix =
      "branch." + std::to_string(cfg.branches - 1) + ".";
  auto strip = [&](const std::string& name) {
    if (name.rfind(leader_prefix, 0) == 0) {
      return "leader." + name.substr(leader_prefix.size());
    }
    return name;
  };
  std::map<std::string, Tensor> full;
  for (NamedParam& p : net.named_parameters()) full.emplace(strip(p.name), p.tensor);
  for (NamedParam& p : student.named_parameters()) {
    auto it = full.find(p.name);
    REQUIRE(it != full.end());
    p.tensor.values_mut() = it->second.values();
  }
  std::map<std::string, std::vector<double>*> full_buf;
  for (NamedBuffer& b : net.named_buffers()) full_buf[strip(b.name)] = b.data;
  for (NamedBuffer& b : student.named_buffers()) {
    auto it = full_buf.find(b.name);
    REQUIRE(it != full_buf.end());
    *b.data = *it->second;
  }

  Rng rng(33);
  Tensor batch = Tensor::randn({3, 2, 8, 8}, rng);
  BranchOutput out = net.forward(batch, Mode::Eval);
  Tensor leader_logits = student.forward(batch, Mode::Eval);
  CHECK(leader_logits.values() == out.logits.back().values());
}
