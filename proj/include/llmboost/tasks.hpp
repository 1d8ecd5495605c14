#pragma once

// Synthetic next-token tasks and the line-delimited dataset format.
//
// Token layout for vocabulary V: ids [0, V-3) are data tokens, V-3 is the
// needle marker, V-2 the separator and V-1 end-of-sequence.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "llmboost/ensemble.hpp"
#include "llmboost/errors.hpp"

namespace llmboost {

struct Example {
  std::vector<int> input;
  std::vector<int> gold;  // same length as input; kNoLabel where unsupervised

  std::size_t labelled() const {
    return static_cast<std::size_t>(std::count_if(gold.begin(), gold.end(), [](int g) { return g != kNoLabel; }));
  }

  friend bool operator==(const Example&, const Example&) = default;
};

using Dataset = std::vector<Example>;

enum class TaskKind { Copy, Reverse, ModSum, Needle };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::ModSum: return "modsum";
    case TaskKind::Needle: return "needle";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "reverse") return TaskKind::Reverse;
  if (s == "modsum") return TaskKind::ModSum;
  if (s == "needle") return TaskKind::Needle;
  throw ContractError("unknown task kind '" + s + "' (expected copy|reverse|modsum|needle)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int min_len = 4;
  int max_len = 8;
  int vocab = 16;
  int count = 256;
  std::uint64_t seed = 1;
  int modulus = 7;  // modsum only

  int eos() const { return vocab - 1; }
  int sep() const { return vocab - 2; }
  int mark() const { return vocab - 3; }
  int data_tokens() const { return vocab - 3; }

  /// Longest sequence the task can emit.
  int max_sequence_length() const {
    switch (kind) {
      case TaskKind::Copy:
      case TaskKind::Reverse: return 2 * max_len + 1;
      case TaskKind::ModSum: return 2 * max_len;
      case TaskKind::Needle: return max_len + 1;
    }
    return 0;
  }

  void validate() const {
    if (vocab < 4) throw ContractError("TaskSpec: vocab must be >= 4");
    if (min_len < 1 || max_len < min_len) throw ContractError("TaskSpec: invalid length bounds");
    if (count < 0) throw ContractError("TaskSpec: count must be >= 0");
    if (kind == TaskKind::ModSum) {
      if (modulus < 2 || modulus > data_tokens()) {
        throw ContractError("TaskSpec: modulus must be in [2, V-3]");
      }
      if (min_len < 2) throw ContractError("TaskSpec: modsum needs min_len >= 2");
    }
    if (kind == TaskKind::Needle && min_len < 3) throw ContractError("TaskSpec: needle needs min_len >= 3");
  }
};

inline Example make_example(const TaskSpec& task, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(task.min_len, task.max_len);
  std::uniform_int_distribution<int> tok(0, task.data_tokens() - 1);
  const int n = len_dist(rng);
  Example ex;
  switch (task.kind) {
    case TaskKind::Copy:
    case TaskKind::Reverse: {
      std::vector<int> x(static_cast<std::size_t>(n));
      for (auto& v : x) v = tok(rng);
      std::vector<int> y = x;
      if (task.kind == TaskKind::Reverse) std::reverse(y.begin(), y.end());
      ex.input = x;
      ex.input.push_back(task.sep());
      ex.input.insert(ex.input.end(), y.begin(), y.end());
      ex.gold.assign(ex.input.size(), kNoLabel);
      for (int j = 0; j < n; ++j) ex.gold[static_cast<std::size_t>(n + j)] = y[static_cast<std::size_t>(j)];
      ex.gold.back() = task.eos();
      break;
    }
    case TaskKind::ModSum: {
      std::uniform_int_distribution<int> digit(0, task.modulus - 1);
      std::vector<int> a(static_cast<std::size_t>(n));
      for (auto& v : a) v = digit(rng);
      std::vector<int> s;
      for (int j = 0; j + 1 < n; ++j) {
        s.push_back((a[static_cast<std::size_t>(j)] + a[static_cast<std::size_t>(j + 1)]) % task.modulus);
      }
      ex.input = a;
      ex.input.push_back(task.sep());
      ex.input.insert(ex.input.end(), s.begin(), s.end());
      ex.gold.assign(ex.input.size(), kNoLabel);
      for (std::size_t j = 0; j < s.size(); ++j) ex.gold[static_cast<std::size_t>(n) + j] = s[j];
      ex.gold.back() = task.eos();
      break;
    }
    case TaskKind::Needle: {
      std::vector<int> x(static_cast<std::size_t>(n));
      std::uniform_int_distribution<int> filler(0, task.data_tokens() - 1);
      for (auto& v : x) v = filler(rng);
      std::uniform_int_distribution<int> where(0, n - 2);
      const int p = where(rng);
      x[static_cast<std::size_t>(p)] = task.mark();
      const int needle = x[static_cast<std::size_t>(p + 1)];
      ex.input = x;
      ex.input.push_back(task.mark());
      ex.gold.assign(ex.input.size(), kNoLabel);
      ex.gold.back() = needle;
      break;
    }
  }
  return ex;
}

inline Dataset gen_dataset(const TaskSpec& task) {
  task.validate();
  std::mt19937_64 rng(task.seed);
  Dataset out;
  out.reserve(static_cast<std::size_t>(task.count));
  for (int i = 0; i < task.count; ++i) out.push_back(make_example(task, rng));
  return out;
}

inline std::string to_jsonl(const Dataset& data) {
  std::ostringstream os;
  for (const auto& ex : data) {
    nlohmann::json j;
    j["input"] = ex.input;
    j["gold"] = ex.gold;
    os << j.dump() << '\n';
  }
  return os.str();
}

inline Dataset parse_jsonl(std::istream& in) {
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex{j.at("input").get<std::vector<int>>(), j.at("gold").get<std::vector<int>>()};
      if (ex.input.size() != ex.gold.size()) throw FormatError("input/gold length mismatch");
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f << to_jsonl(data);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path);
  return parse_jsonl(f);
}

}  // namespace llmboost
