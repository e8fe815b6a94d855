#include "attrobf/cli.hpp"

#include <CLI11.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <csignal>
#include <limits>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "attrobf/data.hpp"
#include "attrobf/errors.hpp"
#include "attrobf/evalkit.hpp"
#include "attrobf/image_io.hpp"
#include "attrobf/kv.hpp"
#include "attrobf/losses.hpp"
#include "attrobf/models.hpp"
#include "attrobf/nets.hpp"
#include "attrobf/serve.hpp"
#include "attrobf/train.hpp"

namespace attrobf::cli {

namespace fs = std::filesystem;

const std::map<std::string, std::string>& default_settings() {
  static const std::map<std::string, std::string> defaults = {
      {"dataset", "shapes"},  // shapes | folder
      {"attrs", "red_fill,border,dark_background,stripe"},
      {"n_train", "4000"},
      {"n_eval", "1000"},
      {"data_seed", "1"},
      {"data_dir", "data"},
      {"image_dir", ""},
      {"attr_file", ""},
      {"crop", "0"},
      {"stage1_ckpt", ""},
      {"stage2_ckpt", ""},
      {"adversary_ckpt", ""},
      {"mixup_adversary_ckpt", ""},
      {"eval_max_per_attr", "400"},
      {"delta2_values", "0,0.1,0.2"},
      {"fid_against", "obfuscated"},  // obfuscated | inverted | reconstructed
      {"toy_n_per_class", "500"},
      {"toy_mean_pos", "2,0"},
      {"toy_mean_neg", "-2,0"},
      {"toy_std", "0.5"},
      {"toy_seed", "7"},
      {"toy_grid", "41"},
      {"toy_spectral_norm", "false"},
      {"host", "127.0.0.1"},
      {"port", "8080"},
      {"threads", "4"},
  };
  return defaults;
}

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  kv::Map cli;
  TrainConfig train;
  NetConfig net;

  const std::string& str(const std::string& k) const { return cli.at(k); }
  int64_t integer(const std::string& k) const { return kv::to_int(k, cli.at(k)); }
  double real(const std::string& k) const { return kv::to_double(k, cli.at(k)); }
  bool flag(const std::string& k) const { return kv::to_bool(k, cli.at(k)); }
  fs::path out_dir() const { return train.out_dir; }

  /// A checkpoint path: the explicit key, else out_dir/fallback.
  fs::path ckpt(const std::string& key, const std::string& fallback) const {
    return str(key).empty() ? out_dir() / fallback : fs::path(str(key));
  }
};

std::set<std::string> keys_of(const kv::Map& m) {
  std::set<std::string> out;
  for (const auto& [k, v] : m) out.insert(k);
  return out;
}

Settings load_settings(const std::string& config_path, const std::vector<std::string>& overrides) {
  const auto train_keys = keys_of(TrainConfig{}.to_map());
  const auto net_keys = keys_of(NetConfig{}.to_map());
  const auto cli_keys = keys_of(default_settings());
  auto known = [&](const std::string& k) { return train_keys.count(k) || net_keys.count(k) || cli_keys.count(k); };

  kv::Map merged;
  if (!config_path.empty()) merged = kv::parse_file(config_path);
  for (const auto& [k, v] : merged)
    if (!known(k)) throw ParseError("unknown config key '" + k + "' in " + config_path);
  for (const auto& o : overrides) {
    auto [k, v] = kv::split_assignment(o);
    if (!known(k)) throw UsageError("--set names unknown key '" + k + "'");
    merged[k] = v;
  }

  Settings s;
  s.cli = default_settings();
  kv::Map train_part, net_part;
  for (const auto& [k, v] : merged) {
    if (train_keys.count(k)) train_part[k] = v;
    else if (net_keys.count(k)) net_part[k] = v;
    else s.cli[k] = v;
  }
  s.train = TrainConfig::from_map(train_part);
  s.net = NetConfig::from_map(net_part);
  if (s.train.out_dir.empty()) s.train.out_dir = "out";
  return s;
}

/// Writes every effective key to out_dir/<verb>.effective.cfg; the file loads back through --config.
void echo_effective(const Settings& s, const std::string& verb) {
  kv::Map all = s.cli;
  for (const auto& [k, v] : s.train.to_map()) all[k] = v;
  for (const auto& [k, v] : s.net.to_map()) all[k] = v;
  fs::create_directories(s.out_dir());
  std::ofstream out(s.out_dir() / (verb + ".effective.cfg"));
  if (!out) throw IoError("cannot write effective config under " + s.out_dir().string());
  kv::write(out, all);
}

struct Data {
  AttrImageDataset train, eval;
};

std::vector<std::string> attr_list(const Settings& s) { return kv::to_list(s.str("attrs")); }

Data load_data(const Settings& s) {
  const auto n_train = s.integer("n_train"), n_eval = s.integer("n_eval");
  Data d;
  if (s.str("dataset") == "shapes") {
    const auto seed = static_cast<uint64_t>(s.integer("data_seed"));
    const int size = static_cast<int>(s.net.image_size);
    d.train = gen_shape_attr(n_train, attr_list(s), size, seed);
    d.eval = gen_shape_attr(n_eval, attr_list(s), size, seed + 1);
    d.eval.split = Split::eval;
  } else if (s.str("dataset") == "folder") {
    if (s.str("image_dir").empty() || s.str("attr_file").empty())
      throw std::invalid_argument("dataset=folder needs image_dir and attr_file");
    PreprocessSpec spec;
    spec.crop = s.integer("crop") > 0 ? static_cast<int>(s.integer("crop")) : std::numeric_limits<int>::max();
    spec.resize = static_cast<int>(s.net.image_size);
    spec.value_range = s.net.value_range;
    LoadOptions opt;
    opt.attrs = attr_list(s);
    opt.first = 0;
    opt.count = n_train;
    d.train = load_attr_dataset(s.str("image_dir"), s.str("attr_file"), spec, opt);
    opt.first = n_train;
    opt.count = n_eval;
    opt.split = Split::eval;
    d.eval = load_attr_dataset(s.str("image_dir"), s.str("attr_file"), spec, opt);
  } else {
    throw std::invalid_argument("dataset must be shapes or folder");
  }
  return d;
}

NetConfig net_for(const Settings& s, const AttrImageDataset& ds) {
  auto n = s.net;
  n.image_size = ds.image_size();
  n.channels = ds.channels();
  n.num_attrs = ds.num_attrs();
  n.value_range = ds.value_range;
  return n;
}

EvalOptions eval_options(const Settings& s) {
  EvalOptions o;
  o.max_per_attr = s.integer("eval_max_per_attr");
  return o;
}

std::vector<double> doubles(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& item : kv::to_list(text)) out.push_back(kv::to_double(key, item));
  return out;
}

std::array<double, 2> point(const std::string& key, const std::string& text) {
  const auto v = doubles(key, text);
  if (v.size() != 2) throw ParseError("key '" + key + "' expects two comma-separated numbers");
  return {v[0], v[1]};
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

void gen_data(const Settings& s, std::ostream& out) {
  if (s.str("dataset") != "shapes") throw std::invalid_argument("gen-data only generates the shapes dataset");
  auto d = load_data(s);
  AttrImageDataset all = d.train;
  all.images = torch::cat({d.train.images, d.eval.images});
  all.labels = torch::cat({d.train.labels, d.eval.labels});
  export_attr_dataset(all, s.str("data_dir"));
  out << "wrote " << all.size() << " images (" << d.train.size() << " train, " << d.eval.size() << " eval) to "
      << s.str("data_dir") << '\n';
}

void train_stage1_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto r = train_stage1(s.train, net_for(s, d.train), d.train);
  out << "stage1 checkpoint " << r.checkpoint.string() << '\n';
}

void train_stage2_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto r = train_stage2(s.train, d.train, s.ckpt("stage1_ckpt", "stage1.ckpt"));
  out << "stage2 checkpoint " << r.checkpoint.string() << '\n';
}

void train_adversary_verb(const Settings& s, bool mixup, std::ostream& out) {
  auto d = load_data(s);
  auto r = train_adversary(d.train, mixup, s.train, net_for(s, d.train));
  auto report = eval_inversion(identity_transform(), r.model, d.eval, d.eval.attr_names, eval_options(s));
  out << (mixup ? "mixup adversary " : "adversary ") << r.checkpoint.string() << " held-out accuracy "
      << kv::format_double(report.mean_real_acc()) << '\n';
}

void train_toy_verb(const Settings& s, std::ostream& out) {
  const auto toy = gen_two_gaussians(s.integer("toy_n_per_class"), point("toy_mean_pos", s.str("toy_mean_pos")),
                                     point("toy_mean_neg", s.str("toy_mean_neg")), s.real("toy_std"),
                                     static_cast<uint64_t>(s.integer("toy_seed")));
  ToyOptions opt;
  opt.hidden = s.net.hidden;
  opt.grid_n = s.integer("toy_grid");
  opt.spectral_norm = s.flag("toy_spectral_norm");
  const auto report = train_toy(s.train, toy, opt);
  const auto dir = s.out_dir() / "toy";
  write_toy_report(report, dir);
  out << "toy report in " << dir.string() << '\n';
}

void eval_inversion_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto model = load_stage1(s.ckpt("stage1_ckpt", "stage1.ckpt"));
  auto adversary = load_adversary(s.ckpt("adversary_ckpt", "adversary.ckpt"));
  auto report = eval_inversion(inversion_transform(model), adversary, d.eval, d.eval.attr_names, eval_options(s));
  const auto path = s.out_dir() / "inversion_report.csv";
  write_inversion_csv(report, path);
  out << "real accuracy " << kv::format_double(report.mean_real_acc()) << ", after inversion "
      << kv::format_double(report.mean_inv_acc()) << "; wrote " << path.string() << '\n';
}

void eval_uncertainty_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto model = load_stage2(s.ckpt("stage2_ckpt", "stage2.ckpt"));
  auto adversary = load_adversary(s.ckpt("mixup_adversary_ckpt", "adversary_mixup.ckpt"));
  auto report = eval_uncertainty(obfuscation_transform(model), adversary, d.eval, d.eval.attr_names, eval_options(s));
  const auto path = s.out_dir() / "uncertainty_report.csv";
  write_uncertainty_csv(report, path);
  out << "mean entropy " << kv::format_double(report.mean_real_entropy()) << " -> "
      << kv::format_double(report.mean_ours_entropy()) << " bits; wrote " << path.string() << '\n';
}

void eval_fid_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto extractor = load_adversary(s.ckpt("adversary_ckpt", "adversary.ckpt"));
  const auto against = s.str("fid_against");
  const auto& x = d.eval.images;
  torch::Tensor generated;
  // Consecutive chunks of 64 images are transformed for successive attributes.
  auto per_attr = [&](const AttrTransform& fn) {
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> parts;
    for (int64_t i = 0, k = 0; i < x.size(0); i += 64, ++k)
      parts.push_back(fn(x.narrow(0, i, std::min<int64_t>(64, x.size(0) - i)), k % d.eval.num_attrs()));
    return torch::cat(parts);
  };
  if (against == "obfuscated") {
    auto m = load_stage2(s.ckpt("stage2_ckpt", "stage2.ckpt"));
    generated = per_attr(obfuscation_transform(m));
  } else if (against == "inverted") {
    auto m = load_stage1(s.ckpt("stage1_ckpt", "stage1.ckpt"));
    generated = per_attr(inversion_transform(m));
  } else if (against == "reconstructed") {
    auto m = load_stage1(s.ckpt("stage1_ckpt", "stage1.ckpt"));
    generated = batched(x, 256, [&](const torch::Tensor& b) { return m.reconstruct(b); });
  } else {
    throw std::invalid_argument("fid_against must be obfuscated, inverted or reconstructed");
  }
  auto r = compute_fid(x, generated, extractor);
  const auto path = s.out_dir() / "fid.txt";
  write_fid(r, path);
  out << "fid " << kv::format_double(r.fid) << "; wrote " << path.string() << '\n';
}

void sweep_delta2_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto adversary = load_adversary(s.ckpt("adversary_ckpt", "adversary.ckpt"));
  auto cfg = s.train;
  cfg.out_dir = (s.out_dir() / "sweep").string();
  auto rows = tradeoff_sweep(cfg, net_for(s, d.train), doubles("delta2_values", s.str("delta2_values")), d.train,
                             d.eval, adversary, eval_options(s));
  const auto path = s.out_dir() / "tradeoff.csv";
  write_tradeoff_csv(rows, path);
  out << "wrote " << path.string() << '\n';
}

cv::Mat read_for_model(const std::string& path, int64_t crop, int size) {
  auto mat = cv::imread(path, cv::IMREAD_COLOR);
  if (mat.empty()) throw IoError("cannot read image " + path);
  return center_crop_resize(mat, crop > 0 ? static_cast<int>(crop) : std::numeric_limits<int>::max(), size);
}

struct ObfuscateArgs {
  std::string input, attr, mode = "obfuscate", value = "auto", output = "obfuscated.png", lambda_output;
};

void obfuscate_verb(const Settings& s, const ObfuscateArgs& a, std::ostream& out) {
  if (a.mode != "invert" && a.mode != "obfuscate") throw UsageError("--mode must be invert or obfuscate");
  if (a.value != "0" && a.value != "1" && a.value != "auto") throw UsageError("--value must be 0, 1 or auto");
  const bool mixing = a.mode == "obfuscate";
  Stage2Model s2;
  Stage1Model s1;
  if (mixing) {
    s2 = load_stage2(s.ckpt("stage2_ckpt", "stage2.ckpt"));
    s1 = s2.stage1;
  } else {
    s1 = load_stage1(s.str("stage1_ckpt").empty() && fs::exists(s.out_dir() / "stage2.ckpt") &&
                             !fs::exists(s.out_dir() / "stage1.ckpt")
                         ? s.out_dir() / "stage2.ckpt"
                         : s.ckpt("stage1_ckpt", "stage1.ckpt"));
  }
  const auto& names = s1.attr_names;
  const auto it = std::find(names.begin(), names.end(), a.attr);
  if (it == names.end()) throw std::invalid_argument("model has no attribute '" + a.attr + "'");
  const auto attr = static_cast<int64_t>(it - names.begin());

  const auto range = s1.net.value_range;
  auto mat = read_for_model(a.input, s.integer("crop"), static_cast<int>(s1.net.image_size));
  auto x = from_mat(mat, range).unsqueeze(0);

  torch::NoGradGuard guard;
  auto lat = s1.encoder->forward(x);
  const auto& c = lat.code;
  auto mask = torch::zeros_like(c), values = torch::zeros_like(c);
  mask[0][attr] = 1;
  values[0][attr] = a.value == "auto" ? (c[0][attr].item<double>() > 0.5 ? 0.0 : 1.0) : std::stod(a.value);
  const auto c_bar = edit_code(c, c, mask, values).c_bar;
  auto result = s1.decoder->forward(x, lat, c_bar);
  auto lam = torch::zeros({1, 1, x.size(2), x.size(3)});
  if (mixing) {
    lam = s2.mix->forward(x, result, c, c_bar).lam;
    result = apply_mix(x, result, MixMap{lam});
  }
  const fs::path output = a.output;
  fs::path lambda_path = a.lambda_output;
  if (lambda_path.empty()) lambda_path = output.parent_path() / (output.stem().string() + "_lambda.png");
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_png(output, result[0], range);
  const auto gray = encode_gray_png(lam[0][0]);
  std::ofstream lf(lambda_path, std::ios::binary);
  if (!lf) throw IoError("cannot write " + lambda_path.string());
  lf.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  out << "wrote " << output.string() << " and " << lambda_path.string() << '\n';
}

void export_figures_verb(const Settings& s, std::ostream& out) {
  auto d = load_data(s);
  auto model = load_stage2(s.ckpt("stage2_ckpt", "stage2.ckpt"));
  auto adversary = load_adversary(s.ckpt("mixup_adversary_ckpt", "adversary_mixup.ckpt"));
  const auto dir = s.out_dir() / "figures";
  auto files = export_scatter(obfuscation_transform(model), adversary, d.eval, d.eval.attr_names, dir, eval_options(s));
  auto hist = export_histograms(inversion_transform(model.stage1), obfuscation_transform(model), adversary, d.eval,
                                d.eval.attr_names, dir, eval_options(s));
  out << "wrote " << files.size() + hist.size() << " files to " << dir.string() << '\n';
}

void serve_verb(const Settings& s, std::ostream& out) {
  auto ckpt = s.ckpt("stage2_ckpt", "stage2.ckpt");
  if (s.str("stage2_ckpt").empty() && !fs::exists(ckpt)) ckpt = s.ckpt("stage1_ckpt", "stage1.ckpt");

  // Block the shutdown signals before any server thread starts so only sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  auto service = std::make_shared<const ObfuscationService>(ckpt, static_cast<int>(s.integer("crop")));
  ServeOptions opt;
  opt.host = s.str("host");
  opt.port = static_cast<int>(s.integer("port"));
  opt.threads = static_cast<size_t>(s.integer("threads"));
  HttpService http(service, opt);
  const int port = http.bind();
  out << "serving " << service->model_version() << " on " << opt.host << ':' << port << std::endl;
  std::thread worker([&] { http.listen(); });
  int sig = 0;
  sigwait(&signals, &sig);
  http.stop();
  worker.join();
  out << "stopped" << std::endl;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attribute inversion and obfuscation toolkit"};
  app.require_subcommand(1);
  std::string config_path, workdir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "flat key = value config file");
  app.add_option("--set", overrides, "override one config key (key=value), repeatable");
  app.add_option("--workdir", workdir, "directory every relative path is resolved against");

  bool mixup = false;
  ObfuscateArgs oa;
  std::map<std::string, CLI::App*> verbs;
  auto verb = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    verbs[name] = sub;
    return sub;
  };
  verb("gen-data", "render the shapes dataset to data_dir");
  verb("train-stage1", "train the inversion model");
  verb("train-stage2", "train the mixing network on a frozen stage1 checkpoint");
  verb("train-adversary", "train the held-out adversary")->add_flag("--mixup", mixup, "train with mixup");
  verb("train-toy", "two-Gaussian experiment");
  verb("eval-inversion", "adversary accuracy on inverted images");
  verb("eval-uncertainty", "mixup-adversary entropy on obfuscated images");
  verb("eval-fid", "Frechet distance between real and generated images");
  verb("sweep-delta2", "privacy and utility for several delta2 margins");
  auto* ob = verb("obfuscate", "edit a single image");
  ob->add_option("--input", oa.input, "input image")->required();
  ob->add_option("--attr", oa.attr, "attribute name")->required();
  ob->add_option("--mode", oa.mode, "invert | obfuscate");
  ob->add_option("--value", oa.value, "0 | 1 | auto");
  ob->add_option("--output", oa.output, "output image path");
  ob->add_option("--lambda-output", oa.lambda_output, "lambda map path");
  verb("export-figures", "scatter and histogram data for the appendix figures");
  verb("serve", "HTTP inference service");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return 2;
  }

  std::string name;
  for (const auto& [n, sub] : verbs)
    if (sub->parsed()) name = n;

  try {
    if (!config_path.empty()) config_path = fs::absolute(config_path).string();
    if (!workdir.empty()) {
      fs::create_directories(workdir);
      fs::current_path(workdir);
    }
    const auto s = load_settings(config_path, overrides);
    s.train.validate();
    echo_effective(s, name);
    torch::set_num_threads(1);

    if (name == "gen-data") gen_data(s, out);
    else if (name == "train-stage1") train_stage1_verb(s, out);
    else if (name == "train-stage2") train_stage2_verb(s, out);
    else if (name == "train-adversary") train_adversary_verb(s, mixup, out);
    else if (name == "train-toy") train_toy_verb(s, out);
    else if (name == "eval-inversion") eval_inversion_verb(s, out);
    else if (name == "eval-uncertainty") eval_uncertainty_verb(s, out);
    else if (name == "eval-fid") eval_fid_verb(s, out);
    else if (name == "sweep-delta2") sweep_delta2_verb(s, out);
    else if (name == "obfuscate") obfuscate_verb(s, oa, out);
    else if (name == "export-figures") export_figures_verb(s, out);
    else if (name == "serve") serve_verb(s, out);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const c10::Error& e) {
    err << "error: " << e.what_without_backtrace() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }
}

}  // namespace attrobf::cli
