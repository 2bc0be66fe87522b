#pragma once

#include <fstream>
#include <sstream>

#include "bag/infer.hpp"

namespace bag {

// Checkpoint container: plain-text header (format version, model config,
// gate constants, run metadata, config echo, parameter directory) followed
// by the parameter blocks as raw 64-bit little-endian floats in directory
// order. Directory order is the sorted parameter-name order, so
// save -> load -> save is byte-identical.
struct Checkpoint {
  ModelConfig cfg;
  double gate_tau = 1.0;
  double gate_eps = kBudgetEps;
  std::map<std::string, Array> params;
  double best_val_acc = 0.0;
  int epoch = 0;
  std::string mode = "none";
  uint64_t seed = 0;
  std::vector<std::string> config_echo;  // producing run config, one line per key

  static Checkpoint from_model(const EncoderModel& m) {
    Checkpoint c;
    c.cfg = m.cfg;
    c.gate_tau = m.gate_tau;
    c.gate_eps = m.gate_eps;
    c.params = m.parameter_arrays();
    return c;
  }

  EncoderModel to_model() const {
    EncoderModel m = EncoderModel::init(cfg, /*seed=*/0, gate_tau);
    m.gate_eps = gate_eps;
    m.load_parameter_arrays(params);
    return m;
  }

  GateParams gate_params() const {
    GateParams p;
    p.a = params.at("gate.a");
    p.s = params.at("gate.s");
    p.tau = gate_tau;
    p.eps = gate_eps;
    return p;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out << "BAGCKPT v" << kCheckpointVersion << "\n";
    out << "config vocab_size=" << cfg.vocab_size << " seq_len=" << cfg.seq_len
        << " hidden=" << cfg.hidden << " layers=" << cfg.layers << " heads=" << cfg.heads
        << " ffn_dim=" << cfg.ffn_dim << " num_classes=" << cfg.num_classes << "\n";
    out << "gate tau=" << format_g17(gate_tau) << " eps=" << format_g17(gate_eps) << "\n";
    out << "meta mode=" << mode << " seed=" << seed << " epoch=" << epoch
        << " best_val_acc=" << format_g17(best_val_acc) << "\n";
    out << "echo " << config_echo.size() << "\n";
    for (const std::string& line : config_echo) out << line << "\n";
    out << "params " << params.size() << "\n";
    for (const auto& [name, a] : params) {
      out << name << " " << a.shape.size();
      for (int d : a.shape) out << " " << d;
      out << "\n";
    }
    out << "BINARY\n";
    for (const auto& [name, a] : params)
      out.write(reinterpret_cast<const char*>(a.data.data()),
                static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("checkpoint: write failure for " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    Checkpoint c;
    std::string line;
    auto next_line = [&](const char* what) {
      if (!std::getline(in, line))
        throw std::runtime_error(std::string("checkpoint: truncated header (") + what + ")");
      return line;
    };
    if (next_line("magic") != "BAGCKPT v" + std::to_string(kCheckpointVersion))
      throw std::runtime_error("checkpoint: bad magic/version in " + path);

    auto parse_kv = [&](const std::string& l, const std::string& section) {
      std::istringstream ss(l);
      std::string tag;
      ss >> tag;
      if (tag != section) throw std::runtime_error("checkpoint: expected " + section + " line");
      std::map<std::string, std::string> kv;
      std::string tok;
      while (ss >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw std::runtime_error("checkpoint: bad header token");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
      }
      return kv;
    };
    auto kv = parse_kv(next_line("config"), "config");
    c.cfg.vocab_size = std::stoi(kv.at("vocab_size"));
    c.cfg.seq_len = std::stoi(kv.at("seq_len"));
    c.cfg.hidden = std::stoi(kv.at("hidden"));
    c.cfg.layers = std::stoi(kv.at("layers"));
    c.cfg.heads = std::stoi(kv.at("heads"));
    c.cfg.ffn_dim = std::stoi(kv.at("ffn_dim"));
    c.cfg.num_classes = std::stoi(kv.at("num_classes"));
    kv = parse_kv(next_line("gate"), "gate");
    c.gate_tau = std::stod(kv.at("tau"));
    c.gate_eps = std::stod(kv.at("eps"));
    kv = parse_kv(next_line("meta"), "meta");
    c.mode = kv.at("mode");
    c.seed = std::stoull(kv.at("seed"));
    c.epoch = std::stoi(kv.at("epoch"));
    c.best_val_acc = std::stod(kv.at("best_val_acc"));

    std::istringstream es(next_line("echo"));
    std::string tag;
    size_t n_echo = 0;
    es >> tag >> n_echo;
    if (tag != "echo") throw std::runtime_error("checkpoint: expected echo line");
    for (size_t i = 0; i < n_echo; ++i) c.config_echo.push_back(next_line("echo entry"));

    std::istringstream ps(next_line("params"));
    size_t n_params = 0;
    ps >> tag >> n_params;
    if (tag != "params") throw std::runtime_error("checkpoint: expected params line");
    std::vector<std::pair<std::string, std::vector<int>>> directory;
    for (size_t i = 0; i < n_params; ++i) {
      std::istringstream ds(next_line("param entry"));
      std::string name;
      int ndims = 0;
      ds >> name >> ndims;
      std::vector<int> shape(ndims);
      for (int& d : shape) ds >> d;
      if (!ds) throw std::runtime_error("checkpoint: bad parameter entry");
      directory.emplace_back(name, shape);
    }
    if (next_line("binary marker") != "BINARY")
      throw std::runtime_error("checkpoint: missing BINARY marker");
    for (auto& [name, shape] : directory) {
      Array a(shape);
      in.read(reinterpret_cast<char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
      if (!in) throw std::runtime_error("checkpoint: truncated parameter block " + name);
      c.params.emplace(name, std::move(a));
    }
    return c;
  }
};

}  // namespace bag
