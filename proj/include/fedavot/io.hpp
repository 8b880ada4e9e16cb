#pragma once

// JSON documents for transport problems and plans.
//
//   problem: {"p": [...], "q": [...], "events": [[...], ...]}
//   plan:    {"n_clients": N, "n_events": M, "entries": [[i, j, value], ...]}

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/mot.hpp"
#include "json.hpp"

namespace fedavot {

using Json = nlohmann::json;

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

// Parses JSON text; syntax errors are reported as "<source>:<line>:<col>".
inline Json parse_json(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::size_t line = 1;
    std::size_t col = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t k = 0; k < end; ++k) {
      if (text[k] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ValidationError(source + ":" + std::to_string(line) + ":" + std::to_string(col) +
                          ": " + e.what());
  }
}

inline Json load_json_file(const std::string& path) {
  return parse_json(read_text_file(path), path);
}

inline TransportProblem problem_from_json(const Json& doc) {
  try {
    return build_problem(doc.at("p").get<std::vector<double>>(),
                         doc.at("q").get<std::vector<double>>(),
                         doc.at("events").get<std::vector<EventSet>>());
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed problem document: ") + e.what());
  }
}

// Serializes the retained events only (zero-availability events were dropped).
inline Json problem_to_json(const TransportProblem& problem) {
  return Json{{"p", problem.importance()},
              {"q", problem.availability()},
              {"events", problem.events()}};
}

inline Json matrix_to_json(const MaskedMatrix& matrix) {
  const Mask& mask = *matrix.mask();
  Json entries = Json::array();
  for (std::size_t j = 0; j < mask.n_cols(); ++j) {
    for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) {
      entries.push_back(Json::array({mask.row(k), j, matrix.values()[k]}));
    }
  }
  return Json{{"n_clients", mask.n_rows()}, {"n_events", mask.n_cols()}, {"entries", entries}};
}

// Reads coordinate triplets onto the problem's mask. Missing coordinates are
// zero; off-mask coordinates are rejected.
inline TransportPlan plan_from_json(const Json& doc, const TransportProblem& problem) {
  try {
    if (doc.at("n_clients").get<std::size_t>() != problem.n_clients() ||
        doc.at("n_events").get<std::size_t>() != problem.n_events()) {
      throw ValidationError("plan shape does not match the problem");
    }
    std::vector<double> values(problem.mask()->nnz(), 0.0);
    for (const Json& entry : doc.at("entries")) {
      const auto i = entry.at(0).get<std::size_t>();
      const auto j = entry.at(1).get<std::size_t>();
      const auto slot = problem.mask()->find(i, j);
      if (!slot) {
        throw ValidationError("plan entry (" + std::to_string(i) + ", " + std::to_string(j) +
                              ") lies off the mask");
      }
      values[*slot] = entry.at(2).get<double>();
    }
    return TransportPlan(problem.mask(), std::move(values));
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed plan document: ") + e.what());
  }
}

}  // namespace fedavot
