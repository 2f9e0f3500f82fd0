#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "humpa/rng.hpp"

namespace humpa {

struct Record {
  std::string id;
  std::string text;

  friend bool operator==(const Record&, const Record&) = default;
};

struct IngestIssue {
  std::string path;
  std::size_t line = 0;  // 1-based; 0 for file-level issues
  std::string message;
};

struct IngestResult {
  std::vector<Record> records;
  std::vector<IngestIssue> errors;
  std::vector<IngestIssue> warnings;
  std::size_t duplicates_dropped = 0;
};

namespace detail {

inline bool is_jsonl_path(const std::string& path) {
  const auto ext = std::filesystem::path(path).extension().string();
  return ext == ".jsonl" || ext == ".ndjson";
}

inline bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace detail

// Reads JSONL ({"id","text"} per line) or plain text (one record per
// non-blank line, id "<file stem>:<line>"). Malformed lines become errors and
// are skipped. A repeated id with identical text is dropped; a repeated id
// with different text is an error and the first record wins.
inline IngestResult ingest(const std::vector<std::string>& paths) {
  IngestResult out;
  std::map<std::string, std::size_t> seen;
  auto add = [&](Record r, const std::string& path, std::size_t line) {
    auto [it, fresh] = seen.emplace(r.id, out.records.size());
    if (fresh) {
      out.records.push_back(std::move(r));
    } else if (out.records[it->second].text == r.text) {
      ++out.duplicates_dropped;
    } else {
      out.errors.push_back({path, line, "duplicate id with different text: " + r.id});
    }
  };
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    const bool jsonl = detail::is_jsonl_path(path);
    const std::string stem = std::filesystem::path(path).stem().string();
    std::string line;
    std::size_t lineno = 0, kept = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (detail::blank(line)) continue;
      if (!jsonl) {
        add({stem + ":" + std::to_string(lineno), line}, path, lineno);
        ++kept;
        continue;
      }
      try {
        const auto j = nlohmann::json::parse(line);
        if (!j.is_object() || !j.contains("id") || !j.contains("text") || !j["id"].is_string() || !j["text"].is_string())
          throw std::invalid_argument("expected {\"id\": string, \"text\": string}");
        add({j["id"].get<std::string>(), j["text"].get<std::string>()}, path, lineno);
        ++kept;
      } catch (const std::exception& e) {
        out.errors.push_back({path, lineno, e.what()});
      }
    }
    if (kept == 0) out.warnings.push_back({path, 0, "no records"});
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<Record>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& r : records) os << nlohmann::json{{"id", r.id}, {"text", r.text}}.dump() << '\n';
}

struct Split {
  std::vector<Record> train;
  std::vector<Record> eval;
};

// Records are ordered by id first, so the split depends only on the record
// set and the seed, not on file order.
inline Split split_records(std::vector<Record> records, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction >= 0.0 && eval_fraction <= 1.0)) throw std::invalid_argument("eval_fraction outside [0,1]");
  std::sort(records.begin(), records.end(), [](const Record& a, const Record& b) { return a.id < b.id; });
  Rng rng(derive_seed(seed, {0x5B11}));
  rng.shuffle(std::span<Record>(records));
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(records.size())));
  Split s;
  s.eval.assign(std::make_move_iterator(records.begin()), std::make_move_iterator(records.begin() + static_cast<std::ptrdiff_t>(n_eval)));
  s.train.assign(std::make_move_iterator(records.begin() + static_cast<std::ptrdiff_t>(n_eval)), std::make_move_iterator(records.end()));
  return s;
}

}  // namespace humpa
