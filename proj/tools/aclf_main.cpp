// Command-line front end: dataset generation, training, evaluation, caption
// generation, clustering-matrix export and gradient checking.
//
// Exit codes: 0 success, 1 usage, 2 I/O failure, 3 numeric failure,
// 4 bad argument semantics.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aclf/aclf.hpp"
#include "aclf/oracle.hpp"

namespace {

using nlohmann::json;

struct BadArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  aclf::ModelConfig model;
  std::string train_path;
  std::string val_path;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double lr_decay = 0.8;
  std::size_t lr_decay_interval = 5;
  std::size_t threads = 2;
  std::string out_dir = "run";
  std::string resume_from;
  std::uint64_t seed = 1;

  json to_json() const {
    json train = {{"epochs", epochs},
                  {"batch_size", batch_size},
                  {"lr", lr},
                  {"lr_decay", lr_decay},
                  {"lr_decay_interval", lr_decay_interval},
                  {"threads", threads},
                  {"out_dir", out_dir}};
    if (!resume_from.empty()) train["resume_from"] = resume_from;
    return json{{"model", model.to_json()},
                {"data", {{"train", train_path}, {"val", val_path}}},
                {"train", train},
                {"seed", seed}};
  }
};

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw BadArgument("config: unknown key \"" + it.key() + "\" in " +
                        where);
  }
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw aclf::IoError("cannot open config file " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw BadArgument("config: " + std::string(e.what()));
  }
  reject_unknown(j, {"model", "data", "train", "seed"}, "the root document");
  RunConfig cfg;
  try {
    if (j.contains("model"))
      cfg.model = aclf::ModelConfig::from_json(j.at("model"), /*strict=*/true);
    if (j.contains("data")) {
      reject_unknown(j.at("data"), {"train", "val"}, "\"data\"");
      if (j.at("data").contains("train"))
        cfg.train_path = j.at("data").at("train").get<std::string>();
      if (j.at("data").contains("val"))
        cfg.val_path = j.at("data").at("val").get<std::string>();
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t,
                     {"epochs", "batch_size", "lr", "lr_decay",
                      "lr_decay_interval", "threads", "out_dir", "resume_from"},
                     "\"train\"");
      if (t.contains("epochs")) cfg.epochs = t.at("epochs").get<std::size_t>();
      if (t.contains("batch_size"))
        cfg.batch_size = t.at("batch_size").get<std::size_t>();
      if (t.contains("lr")) cfg.lr = t.at("lr").get<double>();
      if (t.contains("lr_decay")) cfg.lr_decay = t.at("lr_decay").get<double>();
      if (t.contains("lr_decay_interval"))
        cfg.lr_decay_interval = t.at("lr_decay_interval").get<std::size_t>();
      if (t.contains("threads")) cfg.threads = t.at("threads").get<std::size_t>();
      if (t.contains("out_dir")) cfg.out_dir = t.at("out_dir").get<std::string>();
      if (t.contains("resume_from"))
        cfg.resume_from = t.at("resume_from").get<std::string>();
    }
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw BadArgument("config: " + std::string(e.what()));
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw BadArgument("config: epochs and batch_size must be >= 1");
  if (cfg.lr <= 0.0 || cfg.lr_decay <= 0.0 || cfg.lr_decay_interval < 1)
    throw BadArgument("config: bad learning-rate schedule");
  return cfg;
}

void echo_config(const json& j) {
  std::cout << "config: " << j.dump() << "\n";
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size())
    throw BadArgument("grid must look like 8x8, got \"" + s + "\"");
  const std::size_t h = std::stoul(s.substr(0, x));
  const std::size_t w = std::stoul(s.substr(x + 1));
  if (h < 1 || w < 1) throw BadArgument("grid dimensions must be positive");
  return {h, w};
}

void write_matrix_csv(const std::string& path, const aclf::Tensor& m) {
  std::ofstream os(path);
  if (!os) throw aclf::IoError("cannot write " + path);
  char buf[32];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.at(i, j));
      os << (j ? "," : "") << buf;
    }
    os << "\n";
  }
  if (!os) throw aclf::IoError("write failed for " + path);
}

void write_matrix_pgm(const std::string& path, const aclf::Tensor& m) {
  std::ofstream os(path);
  if (!os) throw aclf::IoError("cannot write " + path);
  os << "P2\n" << m.cols() << " " << m.rows() << "\n255\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const long v = std::lround(255.0 * std::clamp(m.at(i, j), 0.0, 1.0));
      os << (j ? " " : "") << v;
    }
    os << "\n";
  }
  if (!os) throw aclf::IoError("write failed for " + path);
}

std::vector<aclf::TrainSample> to_train_samples(
    const std::vector<aclf::ToySample>& data) {
  std::vector<aclf::TrainSample> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(aclf::to_train_sample(s));
  return out;
}

int cmd_gen_data(std::uint64_t seed, std::size_t count, const std::string& grid,
                 const std::string& out_dir, const std::string& ratios_str) {
  const auto [h, w] = parse_grid(grid);
  std::array<double, 3> ratios{};
  if (std::sscanf(ratios_str.c_str(), "%lf,%lf,%lf", &ratios[0], &ratios[1],
                  &ratios[2]) != 3)
    throw BadArgument("ratios must look like 0.8,0.1,0.1");
  echo_config(json{{"seed", seed},
                   {"count", count},
                   {"grid", grid},
                   {"out", out_dir},
                   {"ratios", ratios_str}});
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  const auto files = aclf::build_dataset(seed, count, ratios, h, w, out_dir);
  std::cout << "wrote " << files.counts[0] << " train / " << files.counts[1]
            << " val / " << files.counts[2] << " test samples under "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path) {
  RunConfig cfg = parse_run_config(config_path);
  echo_config(cfg.to_json());
  if (cfg.train_path.empty() || cfg.val_path.empty())
    throw BadArgument("config: data.train and data.val are required");

  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  {
    std::ofstream os(cfg.out_dir + "/config.json");
    if (!os) throw aclf::IoError("cannot write " + cfg.out_dir + "/config.json");
    os << cfg.to_json().dump(2) << "\n";
  }

  auto train_data = to_train_samples(aclf::load_dataset(cfg.train_path));
  auto val_data = to_train_samples(aclf::load_dataset(cfg.val_path));
  if (train_data.empty()) throw BadArgument("training split is empty");

  std::size_t start_epoch = 0;
  aclf::AdamOptimizer opt;
  std::unique_ptr<aclf::CaptionerModel> model;
  if (!cfg.resume_from.empty()) {
    auto ckpt = aclf::read_checkpoint(cfg.resume_from);
    model = std::make_unique<aclf::CaptionerModel>(aclf::load_model(ckpt));
    if (ckpt.blob.contains("step"))
      opt.set_step_count(ckpt.blob.at("step").get<std::uint64_t>());
    if (ckpt.blob.contains("epoch"))
      start_epoch = ckpt.blob.at("epoch").get<std::size_t>() + 1;
    std::cout << "resumed from " << cfg.resume_from << " at step "
              << opt.step_count() << "\n";
  } else {
    model = std::make_unique<aclf::CaptionerModel>(cfg.model);
  }

  std::ofstream log(cfg.out_dir + "/metrics.csv",
                    start_epoch == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw aclf::IoError("cannot write metrics log");
  if (start_epoch == 0)
    log << "epoch,train_ce,val_ce,val_token_accuracy,val_exact_match\n";

  double best_val_ce = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t e = start_epoch; e < start_epoch + cfg.epochs; ++e) {
    const double lr =
        cfg.lr * std::pow(cfg.lr_decay,
                          static_cast<double>(e / cfg.lr_decay_interval));
    aclf::SplitMix64 shuffle_rng(cfg.seed + 0x51ED270B * (e + 1));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    double train_ce = 0.0;
    std::size_t seen = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      std::vector<aclf::TrainSample> batch;
      for (std::size_t i = at; i < std::min(order.size(), at + cfg.batch_size);
           ++i)
        batch.push_back(train_data[order[i]]);
      const double loss =
          aclf::train_step(*model, batch, opt, lr, cfg.threads);
      train_ce += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    train_ce /= static_cast<double>(seen);

    const auto val = aclf::evaluate(*model, val_data, true, cfg.threads);
    char row[256];
    std::snprintf(row, sizeof(row), "%zu,%.6f,%.6f,%.6f,%.6f", e, train_ce,
                  val.ce, val.token_accuracy, val.exact_match);
    log << row << "\n";
    log.flush();
    std::cout << "epoch " << e << " lr " << lr << " train_ce " << train_ce
              << " val_ce " << val.ce << " val_acc " << val.token_accuracy
              << " val_em " << val.exact_match << "\n";

    const json extra = {{"epoch", e}, {"step", opt.step_count()}};
    aclf::save_checkpoint(cfg.out_dir + "/last.ckpt", *model, extra);
    if (val.ce < best_val_ce) {
      best_val_ce = val.ce;
      aclf::save_checkpoint(cfg.out_dir + "/best.ckpt", *model, extra);
    }
  }
  std::cout << "done; best val_ce " << best_val_ce << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             std::size_t threads) {
  auto model = aclf::load_model(ckpt_path);
  echo_config(model.config().to_json());
  auto data = to_train_samples(aclf::load_dataset(data_path));
  const auto m = aclf::evaluate(model, data, true, threads);
  std::printf("samples=%zu ce=%.6f token_accuracy=%.6f exact_match=%.6f\n",
              m.samples, m.ce, m.token_accuracy, m.exact_match);
  return 0;
}

int cmd_generate(const std::string& ckpt_path, std::uint64_t seed,
                 std::size_t beam) {
  auto model = aclf::load_model(ckpt_path);
  echo_config(model.config().to_json());
  const auto& cfg = model.config();
  const aclf::Scene scene =
      aclf::generate_scene(seed, cfg.grid_h, cfg.grid_w);
  const aclf::Tensor fm = aclf::scene_to_features(scene);
  const std::vector<int> ids = beam <= 1
                                   ? aclf::generate_greedy(model, fm)
                                   : aclf::generate_beam(model, fm, beam);
  std::string line;
  for (const auto& w : aclf::detokenize(ids))
    line += (line.empty() ? "" : " ") + w;
  std::cout << "reference: ";
  std::string ref;
  for (const auto& w : aclf::caption_words(scene))
    ref += (ref.empty() ? "" : " ") + w;
  std::cout << ref << "\n";
  std::cout << "generated: " << line << "\n";
  return 0;
}

int cmd_dump_clusters(const std::string& ckpt_path, std::uint64_t seed,
                      std::size_t layer, const std::string& out_dir) {
  auto model = aclf::load_model(ckpt_path);
  echo_config(model.config().to_json());
  const auto& cfg = model.config();
  if (layer >= std::max(cfg.m_e, cfg.m_d))
    throw BadArgument("layer " + std::to_string(layer) +
                      " beyond encoder depth " + std::to_string(cfg.m_e) +
                      " and decoder depth " + std::to_string(cfg.m_d));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);

  const aclf::Scene scene = aclf::generate_scene(seed, cfg.grid_h, cfg.grid_w);
  const aclf::Tensor fm = aclf::scene_to_features(scene);
  aclf::Tape tape;
  tape.set_enabled(false);
  const auto enc = model.encode(tape, fm);
  if (cfg.acf_encoder && layer < cfg.m_e) {
    const aclf::Tensor& c = enc.cluster_trace[layer];
    write_matrix_csv(out_dir + "/encoder_layer" + std::to_string(layer) + ".csv", c);
    write_matrix_pgm(out_dir + "/encoder_layer" + std::to_string(layer) + ".pgm", c);
    std::cout << "wrote encoder layer " << layer << " (" << c.rows() << "x"
              << c.cols() << ")\n";
  }
  if (cfg.acf_decoder && layer < cfg.m_d) {
    const std::vector<int> caption = aclf::generate_caption(scene);
    std::vector<int> input(caption.begin(), caption.end() - 1);
    const auto dec = model.decode_teacher_forced(tape, enc.memory, input);
    const aclf::Tensor& c = dec.cluster_trace[layer];
    write_matrix_csv(out_dir + "/decoder_layer" + std::to_string(layer) + ".csv", c);
    write_matrix_pgm(out_dir + "/decoder_layer" + std::to_string(layer) + ".pgm", c);
    std::cout << "wrote decoder layer " << layer << " (" << c.rows() << "x"
              << c.cols() << ")\n";
  }
  if (!cfg.acf_encoder && !cfg.acf_decoder)
    throw BadArgument("model has clustering disabled on both sides");
  return 0;
}

int cmd_gradcheck(const std::string& config_path, double fraction) {
  aclf::ModelConfig cfg;
  // Default: the small reference configuration the gradient contract is
  // pinned at.
  cfg.d = 8;
  cfg.heads = 2;
  cfg.d_ff = 32;
  cfg.m_e = 2;
  cfg.m_d = 2;
  cfg.grid_h = 3;
  cfg.grid_w = 3;
  cfg.max_caption_len = 8;
  cfg.seed = 7;
  if (!config_path.empty()) {
    RunConfig rc = parse_run_config(config_path);
    cfg = rc.model;
  }
  echo_config(cfg.to_json());
  aclf::CaptionerModel model(cfg);

  aclf::SplitMix64 rng(cfg.seed ^ 0xD1CEBEEF);
  aclf::Tensor fm({cfg.grid_h * cfg.grid_w, cfg.d_in});
  fm.fill_uniform(rng, -1.0, 1.0);
  std::vector<int> caption = {aclf::kBosId};
  for (int i = 0; i < 4; ++i)
    caption.push_back(3 + static_cast<int>(rng.next_below(cfg.vocab_size - 3)));
  caption.push_back(aclf::kEosId);

  auto loss_forward = [&]() {
    aclf::Tape t;
    t.set_enabled(false);
    const auto enc = model.encode(t, fm);
    std::vector<int> in(caption.begin(), caption.end() - 1);
    std::vector<int> tg(caption.begin() + 1, caption.end());
    const auto dec = model.decode_teacher_forced(t, enc.memory, in);
    return aclf::cross_entropy(t, dec.logits, tg, aclf::kPadId).item();
  };
  auto loss_with_grads = [&]() {
    model.zero_grads();
    aclf::Tape t;
    const auto enc = model.encode(t, fm);
    std::vector<int> in(caption.begin(), caption.end() - 1);
    std::vector<int> tg(caption.begin() + 1, caption.end());
    const auto dec = model.decode_teacher_forced(t, enc.memory, in);
    aclf::Tensor loss = aclf::cross_entropy(t, dec.logits, tg, aclf::kPadId);
    loss.grad()[0] = 1.0;
    t.backward();
    return loss.item();
  };

  const auto report = aclf::oracle::finite_diff(
      loss_forward, loss_with_grads, model.named_parameters(), fraction, 1e-5,
      cfg.seed);
  std::size_t sampled = 0;
  for (const auto& e : report.per_param) sampled += e.sampled;
  std::printf("sampled %zu coordinates across %zu parameters (step %.1e)\n",
              sampled, report.per_param.size(), report.step);
  std::printf("max_rel_err=%.3e at %s[%zu]\n", report.max_rel_err,
              report.worst_param.c_str(), report.worst_index);
  if (report.max_rel_err > 1e-4) {
    std::printf("FAIL: analytic gradient disagrees with finite differences\n");
    return 3;
  }
  std::printf("OK\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive-clustering transformer captioner"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::size_t count = 1000;
  std::string grid = "8x8";
  std::string out = "data";
  std::string ratios = "0.8,0.1,0.1";
  auto* gen = app.add_subcommand("gen-data", "generate a toy scene dataset");
  gen->add_option("--seed", seed, "base seed");
  gen->add_option("--count", count, "total sample count");
  gen->add_option("--grid", grid, "grid size HxW");
  gen->add_option("--out", out, "output directory");
  gen->add_option("--ratios", ratios, "train,val,test split ratios");

  std::string config_path;
  auto* train = app.add_subcommand("train", "train from a JSON run config");
  train->add_option("--config", config_path, "run config path")->required();

  std::string ckpt_path, data_path;
  std::size_t threads = 2;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_path, "JSONL dataset path")->required();
  eval->add_option("--threads", threads, "evaluation threads");

  std::string gen_ckpt;
  std::uint64_t gen_seed = 1;
  std::size_t beam = 1;
  auto* generate = app.add_subcommand("generate", "caption a seeded scene");
  generate->add_option("--checkpoint", gen_ckpt, "checkpoint path")->required();
  generate->add_option("--seed", gen_seed, "scene seed");
  generate->add_option("--beam", beam, "beam width (1 = greedy)");

  std::string dump_ckpt, dump_out = "clusters";
  std::uint64_t dump_seed = 1;
  std::size_t layer = 0;
  auto* dump = app.add_subcommand("dump-clusters",
                                  "export accumulated clustering matrices");
  dump->add_option("--checkpoint", dump_ckpt, "checkpoint path")->required();
  dump->add_option("--seed", dump_seed, "scene seed");
  dump->add_option("--layer", layer, "layer index");
  dump->add_option("--out", dump_out, "output directory");

  std::string gc_config;
  double fraction = 0.1;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of the whole-model gradient");
  gradcheck->add_option("--config", gc_config, "run config path (optional)");
  gradcheck->add_option("--fraction", fraction, "coordinate sample fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(seed, count, grid, out, ratios);
    if (train->parsed()) return cmd_train(config_path);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_path, threads);
    if (generate->parsed()) return cmd_generate(gen_ckpt, gen_seed, beam);
    if (dump->parsed())
      return cmd_dump_clusters(dump_ckpt, dump_seed, layer, dump_out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_config, fraction);
  } catch (const BadArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const aclf::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const aclf::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
