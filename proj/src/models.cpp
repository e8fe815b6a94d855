#include "attrobf/models.hpp"

#include <sstream>

#include "attrobf/errors.hpp"
#include "attrobf/kv.hpp"
#include "attrobf/losses.hpp"

namespace attrobf {

namespace {

std::string net_text(const NetConfig& net) {
  std::ostringstream out;
  kv::write(out, net.to_map());
  return out.str();
}

NetConfig parse_net(const std::string& text) {
  std::istringstream in(text);
  auto net = NetConfig::from_map(kv::parse(in));
  net.validate();
  return net;
}

torch::Tensor column_mask(const torch::Tensor& like, int64_t attr) {
  auto mask = torch::zeros_like(like);
  mask.select(1, attr).fill_(1);
  return mask;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage I
// ---------------------------------------------------------------------------

Stage1Model Stage1Model::create(const NetConfig& net, const std::vector<std::string>& attr_names) {
  net.validate();
  if (static_cast<int64_t>(attr_names.size()) != net.num_attrs)
    throw std::invalid_argument("attribute names do not match num_attrs");
  Stage1Model m;
  m.net = net;
  m.attr_names = attr_names;
  m.encoder = Encoder(net);
  m.decoder = Decoder(net);
  m.disc = Discriminator(net);
  return m;
}

void Stage1Model::train(bool on) {
  encoder->train(on);
  decoder->train(on);
  disc->train(on);
}

std::vector<torch::Tensor> Stage1Model::generator_parameters() const {
  auto params = encoder->parameters();
  auto dec = decoder->parameters();
  params.insert(params.end(), dec.begin(), dec.end());
  return params;
}

torch::Tensor Stage1Model::reconstruct(const torch::Tensor& x) {
  auto lat = encoder->forward(x);
  return decoder->forward(x, lat, lat.code);
}

torch::Tensor Stage1Model::edit(const torch::Tensor& x, const torch::Tensor& mask, const torch::Tensor& values) {
  auto lat = encoder->forward(x);
  auto plan = edit_code(lat.code, lat.code, mask, values);
  return decoder->forward(x, lat, plan.c_bar);
}

torch::Tensor Stage1Model::assign(const torch::Tensor& x, int64_t attr, const torch::Tensor& target) {
  if (attr < 0 || attr >= net.num_attrs) throw std::invalid_argument("attribute index out of range");
  auto lat = encoder->forward(x);
  auto mask = column_mask(lat.code, attr);
  auto values = mask * target.reshape({-1, 1}).to(lat.code.dtype());
  return decoder->forward(x, lat, edit_code(lat.code, lat.code, mask, values).c_bar);
}

torch::Tensor Stage1Model::invert(const torch::Tensor& x, int64_t attr) {
  if (attr < 0 || attr >= net.num_attrs) throw std::invalid_argument("attribute index out of range");
  auto lat = encoder->forward(x);
  auto mask = column_mask(lat.code, attr);
  auto flipped = 1 - lat.code.select(1, attr).gt(0.5).to(lat.code.dtype());
  auto values = mask * flipped.unsqueeze(1);
  return decoder->forward(x, lat, edit_code(lat.code, lat.code, mask, values).c_bar);
}

void Stage1Model::write(CheckpointWriter& out) const {
  out.put("net_config", net_text(net));
  out.put("attr_names", kv::from_list(attr_names));
  out.put_module("encoder", *encoder);
  out.put_module("decoder", *decoder);
  out.put_module("disc", *disc);
}

Stage1Model Stage1Model::read(CheckpointReader& in) {
  auto m = create(parse_net(in.get_string("net_config")), kv::to_list(in.get_string("attr_names")));
  in.load_module("encoder", *m.encoder);
  in.load_module("decoder", *m.decoder);
  in.load_module("disc", *m.disc);
  return m;
}

// ---------------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------------

Stage2Model Stage2Model::create(Stage1Model stage1) {
  Stage2Model m;
  m.mix = MixNet(stage1.net);
  m.stage1 = std::move(stage1);
  return m;
}

void Stage2Model::train(bool on) {
  stage1.train(false);
  mix->train(on);
}

Stage2Model::Output Stage2Model::obfuscate(const torch::Tensor& x, int64_t attr) {
  if (attr < 0 || attr >= stage1.net.num_attrs) throw std::invalid_argument("attribute index out of range");
  Output out;
  auto lat = stage1.encoder->forward(x);
  auto c = lat.code;
  auto mask = column_mask(c, attr);
  auto values = mask * (1 - c.select(1, attr).gt(0.5).to(c.dtype())).unsqueeze(1);
  auto c_bar = edit_code(c, c, mask, values).c_bar;
  out.x_bar = stage1.decoder->forward(x, lat, c_bar);
  out.lam = mix->forward(x, out.x_bar, c, c_bar).lam;
  out.x_prime = apply_mix(x, out.x_bar, MixMap{out.lam});
  return out;
}

void Stage2Model::write(CheckpointWriter& out) const {
  stage1.write(out);
  out.put_module("mix", *mix);
}

Stage2Model Stage2Model::read(CheckpointReader& in) {
  auto m = create(Stage1Model::read(in));
  in.load_module("mix", *m.mix);
  return m;
}

// ---------------------------------------------------------------------------
// Adversary
// ---------------------------------------------------------------------------

torch::Tensor AdversaryModel::predict(const torch::Tensor& x) { return net_module->predict(x); }

torch::Tensor AdversaryModel::features(const torch::Tensor& x) { return net_module->features(x); }

void AdversaryModel::write(CheckpointWriter& out) const {
  out.put("net_config", net_text(net));
  out.put("attr_names", kv::from_list(attr_names));
  out.put("mixup", static_cast<int64_t>(mixup ? 1 : 0));
  out.put("trained", static_cast<int64_t>(net_module->trained() ? 1 : 0));
  out.put_module("adversary", *net_module);
}

AdversaryModel AdversaryModel::read(CheckpointReader& in) {
  AdversaryModel m;
  m.net = parse_net(in.get_string("net_config"));
  m.attr_names = kv::to_list(in.get_string("attr_names"));
  m.mixup = in.get_int("mixup") != 0;
  m.net_module = Adversary(m.net);
  in.load_module("adversary", *m.net_module);
  m.net_module->set_trained(in.get_int("trained") != 0);
  m.net_module->eval();
  return m;
}

Stage1Model load_stage1(const std::filesystem::path& path) {
  CheckpointReader in(path);
  if (in.kind() != "stage1" && in.kind() != "stage2")
    throw IoError(path.string() + " is a " + in.kind() + " checkpoint, expected stage1");
  auto m = Stage1Model::read(in);
  m.train(false);
  return m;
}

Stage2Model load_stage2(const std::filesystem::path& path) {
  CheckpointReader in(path);
  if (in.kind() != "stage2") throw IoError(path.string() + " is a " + in.kind() + " checkpoint, expected stage2");
  auto m = Stage2Model::read(in);
  m.train(false);
  return m;
}

AdversaryModel load_adversary(const std::filesystem::path& path) {
  CheckpointReader in(path);
  if (in.kind() != "adversary") throw IoError(path.string() + " is a " + in.kind() + " checkpoint, expected adversary");
  return AdversaryModel::read(in);
}

void save_adversary(const std::filesystem::path& path, const AdversaryModel& model) {
  CheckpointWriter out("adversary");
  model.write(out);
  out.commit(path);
}

}  // namespace attrobf
