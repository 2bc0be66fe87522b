#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "bag/array.hpp"

#include <nlohmann/json.hpp>

namespace bag {

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

// Marked-token vocabulary layout: PAD=0, MARKER=1, values occupy
// [2, 2+n_values), fillers occupy [2+n_values, 2+n_values+16).
struct MarkedTaskConfig {
  int seq_len = 64;
  int n_values = 8;
  static constexpr int kPad = 0;
  static constexpr int kMarker = 1;
  static constexpr int kFillerAlphabet = 16;

  int value_id(int v) const { return 2 + v; }
  int filler_base() const { return 2 + n_values; }
  int vocab_size() const { return 2 + n_values + kFillerAlphabet; }

  void validate() const {
    if (seq_len < 4) throw std::invalid_argument("marked task: seq_len must be >= 4");
    if (n_values < 2) throw std::invalid_argument("marked task: n_values must be >= 2");
  }
};

struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
  uint64_t seed = 0;
  int vocab_size = 0;
  int seq_len = 0;
  int num_classes = 2;
};

// One split of the synthetic task. Two MARKER tokens at distinct positions
// p1 < p2 with the value token at p+1 and non-overlapping pairs; label 1
// iff the two values match. Labels are forced to alternate match/mismatch
// so class balance is exact to within one example.
inline std::vector<Example> gen_marked(uint64_t seed, int n_examples,
                                       const MarkedTaskConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pos1_dist(0, cfg.seq_len - 4);
  std::uniform_int_distribution<int> value_dist(0, cfg.n_values - 1);
  std::uniform_int_distribution<int> filler_dist(cfg.filler_base(),
                                                 cfg.filler_base() + cfg.kFillerAlphabet - 1);
  std::vector<Example> out;
  out.reserve(n_examples);
  for (int i = 0; i < n_examples; ++i) {
    bool want_match = i % 2 == 0;
    int p1 = pos1_dist(rng);
    std::uniform_int_distribution<int> pos2_dist(p1 + 2, cfg.seq_len - 2);
    int p2 = pos2_dist(rng);
    int v1 = value_dist(rng);
    int v2;
    if (want_match) {
      v2 = v1;
    } else {
      v2 = value_dist(rng);
      if (v2 == v1) v2 = (v2 + 1) % cfg.n_values;
    }
    Example ex;
    ex.tokens.resize(cfg.seq_len);
    for (int& t : ex.tokens) t = filler_dist(rng);
    ex.tokens[p1] = cfg.kMarker;
    ex.tokens[p1 + 1] = cfg.value_id(v1);
    ex.tokens[p2] = cfg.kMarker;
    ex.tokens[p2 + 1] = cfg.value_id(v2);
    ex.label = v1 == v2 ? 1 : 0;
    out.push_back(std::move(ex));
  }
  return out;
}

inline DatasetSplit gen_marked_splits(uint64_t seed, int n_train, int n_val, int n_test,
                                      const MarkedTaskConfig& cfg) {
  DatasetSplit ds;
  // Disjoint derived seeds per split.
  ds.train = gen_marked(seed * 3 + 0, n_train, cfg);
  ds.val = gen_marked(seed * 3 + 1, n_val, cfg);
  ds.test = gen_marked(seed * 3 + 2, n_test, cfg);
  ds.seed = seed;
  ds.vocab_size = cfg.vocab_size();
  ds.seq_len = cfg.seq_len;
  ds.num_classes = 2;
  return ds;
}

// ---------------------------------------------------------------- CSV loader

struct Vocabulary {
  std::unordered_map<std::string, int> word_to_id;
  std::vector<std::string> id_to_word;
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  int id_of(const std::string& w) const {
    auto it = word_to_id.find(w);
    return it == word_to_id.end() ? kUnk : it->second;
  }
};

inline std::vector<std::string> word_tokenize(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Minimal CSV line parser handling double-quoted fields with "" escapes.
inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

struct CsvRow {
  int label;
  std::string text;
};

inline std::vector<CsvRow> read_label_text_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("csv: cannot open " + path);
  std::vector<CsvRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = parse_csv_line(line);
    if (fields.size() < 2)
      throw std::runtime_error("csv: line " + std::to_string(lineno) +
                               ": expected label,text columns");
    CsvRow row;
    try {
      row.label = std::stoi(fields[0]);
    } catch (const std::exception&) {
      throw std::runtime_error("csv: line " + std::to_string(lineno) + ": bad label '" +
                               fields[0] + "'");
    }
    // Extra columns (e.g. title,description) are joined into one text.
    row.text = fields[1];
    for (size_t i = 2; i < fields.size(); ++i) row.text += " " + fields[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Vocabulary build_vocabulary(const std::vector<CsvRow>& train_rows, int vocab_size) {
  if (vocab_size < 3) throw std::invalid_argument("vocabulary: vocab_size must be >= 3");
  std::unordered_map<std::string, int64_t> counts;
  std::vector<std::string> first_seen;
  for (const CsvRow& row : train_rows)
    for (const std::string& w : word_tokenize(row.text)) {
      auto [it, inserted] = counts.emplace(w, 0);
      if (inserted) first_seen.push_back(w);
      ++it->second;
    }
  // Frequency descending, first-seen order breaking ties: deterministic.
  std::stable_sort(first_seen.begin(), first_seen.end(),
                   [&](const std::string& a, const std::string& b) {
                     return counts.at(a) > counts.at(b);
                   });
  Vocabulary v;
  v.id_to_word = {"<pad>", "<unk>"};
  for (const std::string& w : first_seen) {
    if (static_cast<int>(v.id_to_word.size()) >= vocab_size) break;
    v.id_to_word.push_back(w);
  }
  for (size_t i = 0; i < v.id_to_word.size(); ++i)
    v.word_to_id[v.id_to_word[i]] = static_cast<int>(i);
  return v;
}

inline Example encode_text(const Vocabulary& vocab, const CsvRow& row, int seq_len) {
  Example ex;
  ex.label = row.label;
  ex.tokens.assign(seq_len, Vocabulary::kPad);
  auto words = word_tokenize(row.text);
  for (int i = 0; i < seq_len && i < static_cast<int>(words.size()); ++i)
    ex.tokens[i] = vocab.id_of(words[i]);
  return ex;
}

struct TextDataset {
  DatasetSplit split;
  Vocabulary vocab;
};

// Word-level text classification loader. Labels in the CSV may be
// arbitrary integers; they are remapped to 0..C-1 in sorted order. The
// validation split is carved from the head of the shuffled training file.
inline TextDataset load_text_csv(const std::string& train_path, const std::string& test_path,
                                 int vocab_size, int seq_len, int n_val, uint64_t seed) {
  auto train_rows = read_label_text_csv(train_path);
  auto test_rows = read_label_text_csv(test_path);
  if (train_rows.empty()) throw std::runtime_error("csv: empty training split");
  if (n_val < 0 || n_val >= static_cast<int>(train_rows.size()))
    throw std::invalid_argument("csv: n_val out of range");

  std::mt19937_64 rng(seed);
  std::shuffle(train_rows.begin(), train_rows.end(), rng);
  std::vector<CsvRow> val_rows(train_rows.begin(), train_rows.begin() + n_val);
  train_rows.erase(train_rows.begin(), train_rows.begin() + n_val);

  std::vector<int> labels;
  for (const CsvRow& r : train_rows) labels.push_back(r.label);
  for (const CsvRow& r : test_rows) labels.push_back(r.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  std::unordered_map<int, int> remap;
  for (size_t i = 0; i < labels.size(); ++i) remap[labels[i]] = static_cast<int>(i);

  TextDataset ds;
  ds.vocab = build_vocabulary(train_rows, vocab_size);
  auto encode_all = [&](const std::vector<CsvRow>& rows, std::vector<Example>& out) {
    for (const CsvRow& r : rows) {
      CsvRow mapped = r;
      mapped.label = remap.at(r.label);
      out.push_back(encode_text(ds.vocab, mapped, seq_len));
    }
  };
  encode_all(train_rows, ds.split.train);
  encode_all(val_rows, ds.split.val);
  encode_all(test_rows, ds.split.test);
  ds.split.seed = seed;
  ds.split.vocab_size = vocab_size;
  ds.split.seq_len = seq_len;
  ds.split.num_classes = static_cast<int>(labels.size());
  return ds;
}

// ---------------------------------------------------------------- fixtures

inline void write_examples_jsonl(const std::vector<Example>& examples,
                                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("jsonl: cannot open " + path);
  for (const Example& ex : examples) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    j["label"] = ex.label;
    out << j.dump() << "\n";
  }
}

inline std::vector<Example> read_examples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("jsonl: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Example ex;
    ex.tokens = j.at("tokens").get<std::vector<int>>();
    ex.label = j.at("label").get<int>();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace bag
