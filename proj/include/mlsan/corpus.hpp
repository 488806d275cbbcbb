#pragma once

// Dialogue corpora and their CSV feature-file representation.
//
// One feature file per modality with header
//   dialogue_id,utterance_idx,speaker_id,f0,...,f{d-1}
// and one labels file with header
//   dialogue_id,utterance_idx,speaker_id,emotion
// Rows are sorted by (dialogue_id, utterance_idx) and aligned across files.
// Floats are written in shortest round-trip decimal form.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mlsan/errors.hpp"

namespace mlsan {

struct Utterance {
  std::size_t speaker = 0;
  std::size_t emotion = 0;
  std::vector<std::vector<double>> features;  // one vector per modality

  bool operator==(const Utterance&) const = default;
};

struct Dialogue {
  std::size_t id = 0;
  std::vector<Utterance> utterances;  // index == position in dialogue

  bool operator==(const Dialogue&) const = default;
};

struct DialogueCorpus {
  std::vector<std::string> modality_names;
  std::vector<std::size_t> modality_dims;
  std::size_t num_speakers = 0;
  std::size_t num_emotions = 0;
  std::vector<Dialogue> dialogues;
  bool synthetic = false;

  std::size_t utterance_count() const {
    std::size_t n = 0;
    for (const auto& d : dialogues) n += d.utterances.size();
    return n;
  }

  std::vector<std::size_t> emotion_histogram() const {
    std::vector<std::size_t> h(num_emotions, 0);
    for (const auto& d : dialogues) {
      for (const auto& u : d.utterances) ++h[u.emotion];
    }
    return h;
  }

  void validate() const {
    if (modality_names.size() != modality_dims.size() || modality_dims.empty()) {
      throw ContractError("corpus modality names and widths are inconsistent");
    }
    for (const auto& d : dialogues) {
      for (const auto& u : d.utterances) {
        if (u.speaker >= num_speakers) {
          throw ContractError("speaker " + std::to_string(u.speaker) + " outside registry of " +
                              std::to_string(num_speakers));
        }
        if (u.emotion >= num_emotions) {
          throw ContractError("emotion " + std::to_string(u.emotion) + " outside " +
                              std::to_string(num_emotions) + " classes");
        }
        if (u.features.size() != modality_dims.size()) {
          throw ContractError("utterance carries the wrong number of modalities");
        }
        for (std::size_t m = 0; m < modality_dims.size(); ++m) {
          if (u.features[m].size() != modality_dims[m]) {
            throw ContractError("feature width mismatch in modality " + modality_names[m]);
          }
        }
      }
    }
  }

  bool operator==(const DialogueCorpus&) const = default;
};

// Registry information the CSV files do not carry.
struct CorpusSchema {
  std::size_t num_emotions = 0;
  std::optional<std::size_t> num_speakers;  // inferred as max id + 1 when absent
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return cells;
}

inline std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

inline std::size_t parse_index(std::string_view cell, const std::filesystem::path& path,
                               std::size_t line, const char* column) {
  std::uint64_t v = 0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || cell.empty()) {
    throw ParseError(where(path, line) + "column " + column + ": '" + std::string(cell) +
                     "' is not a non-negative integer");
  }
  return static_cast<std::size_t>(v);
}

inline double parse_double(std::string_view cell, const std::filesystem::path& path, std::size_t line) {
  double v = 0.0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || cell.empty()) {
    throw ParseError(where(path, line) + "'" + std::string(cell) + "' is not a number");
  }
  if (!std::isfinite(v)) throw ParseError(where(path, line) + "non-finite feature value");
  return v;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

inline void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << contents;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline std::filesystem::path feature_file(const std::filesystem::path& dir, std::string_view modality) {
  return dir / ("features_" + std::string(modality) + ".csv");
}

inline std::filesystem::path labels_file(const std::filesystem::path& dir) { return dir / "labels.csv"; }

inline void write_corpus(const DialogueCorpus& corpus, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  for (std::size_t m = 0; m < corpus.modality_dims.size(); ++m) {
    std::ostringstream os;
    os << "dialogue_id,utterance_idx,speaker_id";
    for (std::size_t j = 0; j < corpus.modality_dims[m]; ++j) os << ",f" << j;
    os << '\n';
    for (const auto& d : corpus.dialogues) {
      for (std::size_t i = 0; i < d.utterances.size(); ++i) {
        const auto& u = d.utterances[i];
        os << d.id << ',' << i << ',' << u.speaker;
        for (double v : u.features[m]) os << ',' << format_double(v);
        os << '\n';
      }
    }
    detail::write_file(feature_file(dir, corpus.modality_names[m]), os.str());
  }
  std::ostringstream os;
  os << "dialogue_id,utterance_idx,speaker_id,emotion\n";
  for (const auto& d : corpus.dialogues) {
    for (std::size_t i = 0; i < d.utterances.size(); ++i) {
      os << d.id << ',' << i << ',' << d.utterances[i].speaker << ',' << d.utterances[i].emotion << '\n';
    }
  }
  detail::write_file(labels_file(dir), os.str());
}

struct ModalityFile {
  std::string name;
  std::filesystem::path path;
};

inline DialogueCorpus read_feature_csv(const std::vector<ModalityFile>& modalities,
                                       const std::filesystem::path& labels_path,
                                       const CorpusSchema& schema) {
  if (modalities.empty()) throw ContractError("at least one modality file is required");
  if (schema.num_emotions == 0) throw ContractError("schema must declare the emotion count");

  struct Key {
    std::size_t dialogue, position, speaker;
  };
  DialogueCorpus corpus;
  corpus.num_emotions = schema.num_emotions;

  const auto label_lines = detail::read_lines(labels_path);
  if (label_lines.size() <= 1) throw ParseError(labels_path.string() + ": empty corpus (no utterance rows)");
  if (label_lines[0] != "dialogue_id,utterance_idx,speaker_id,emotion") {
    throw ParseError(detail::where(labels_path, 1) + "unexpected header '" + label_lines[0] + "'");
  }
  std::vector<Key> keys;
  std::vector<std::size_t> emotions;
  std::size_t max_speaker = 0;
  for (std::size_t ln = 1; ln < label_lines.size(); ++ln) {
    const std::size_t line_no = ln + 1;
    auto cells = detail::split_csv_line(label_lines[ln]);
    if (cells.size() != 4) {
      throw ParseError(detail::where(labels_path, line_no) + "expected 4 cells, found " +
                       std::to_string(cells.size()));
    }
    Key k{detail::parse_index(cells[0], labels_path, line_no, "dialogue_id"),
          detail::parse_index(cells[1], labels_path, line_no, "utterance_idx"),
          detail::parse_index(cells[2], labels_path, line_no, "speaker_id")};
    const std::size_t emotion = detail::parse_index(cells[3], labels_path, line_no, "emotion");
    if (emotion >= schema.num_emotions) {
      throw ParseError(detail::where(labels_path, line_no) + "emotion " + std::to_string(emotion) +
                       " outside " + std::to_string(schema.num_emotions) + " classes");
    }
    if (schema.num_speakers && k.speaker >= *schema.num_speakers) {
      throw ParseError(detail::where(labels_path, line_no) + "unknown speaker id " +
                       std::to_string(k.speaker));
    }
    if (!keys.empty()) {
      const Key& prev = keys.back();
      const bool ordered = k.dialogue > prev.dialogue ||
                           (k.dialogue == prev.dialogue && k.position == prev.position + 1);
      if (!ordered) {
        throw ParseError(detail::where(labels_path, line_no) +
                         "rows must be sorted by (dialogue_id, utterance_idx) with consecutive positions");
      }
      if (k.dialogue != prev.dialogue && k.position != 0) {
        throw ParseError(detail::where(labels_path, line_no) + "dialogue does not start at utterance 0");
      }
    } else if (k.position != 0) {
      throw ParseError(detail::where(labels_path, line_no) + "dialogue does not start at utterance 0");
    }
    max_speaker = std::max(max_speaker, k.speaker);
    keys.push_back(k);
    emotions.push_back(emotion);
  }
  corpus.num_speakers = schema.num_speakers ? *schema.num_speakers : max_speaker + 1;

  std::vector<std::vector<std::vector<double>>> features(keys.size());
  for (const auto& mf : modalities) {
    const auto lines = detail::read_lines(mf.path);
    if (lines.empty()) throw ParseError(mf.path.string() + ": empty feature file");
    auto header = detail::split_csv_line(lines[0]);
    if (header.size() < 4 || header[0] != "dialogue_id" || header[1] != "utterance_idx" ||
        header[2] != "speaker_id") {
      throw ParseError(detail::where(mf.path, 1) + "unexpected header");
    }
    const std::size_t width = header.size() - 3;
    for (std::size_t j = 0; j < width; ++j) {
      if (header[3 + j] != "f" + std::to_string(j)) {
        throw ParseError(detail::where(mf.path, 1) + "feature column " + std::to_string(j) +
                         " should be named f" + std::to_string(j));
      }
    }
    if (lines.size() - 1 != keys.size()) {
      throw ParseError(mf.path.string() + ": " + std::to_string(lines.size() - 1) + " rows but " +
                       std::to_string(keys.size()) + " labels");
    }
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
      const std::size_t line_no = ln + 1;
      auto cells = detail::split_csv_line(lines[ln]);
      if (cells.size() != width + 3) {
        throw ParseError(detail::where(mf.path, line_no) + "ragged row: expected " +
                         std::to_string(width + 3) + " cells, found " + std::to_string(cells.size()));
      }
      const Key& k = keys[ln - 1];
      if (detail::parse_index(cells[0], mf.path, line_no, "dialogue_id") != k.dialogue ||
          detail::parse_index(cells[1], mf.path, line_no, "utterance_idx") != k.position ||
          detail::parse_index(cells[2], mf.path, line_no, "speaker_id") != k.speaker) {
        throw ParseError(detail::where(mf.path, line_no) + "row key does not match labels file");
      }
      std::vector<double> f(width);
      for (std::size_t j = 0; j < width; ++j) f[j] = detail::parse_double(cells[3 + j], mf.path, line_no);
      features[ln - 1].push_back(std::move(f));
    }
    corpus.modality_names.push_back(mf.name);
    corpus.modality_dims.push_back(width);
  }

  for (std::size_t r = 0; r < keys.size(); ++r) {
    if (corpus.dialogues.empty() || corpus.dialogues.back().id != keys[r].dialogue) {
      corpus.dialogues.push_back(Dialogue{keys[r].dialogue, {}});
    }
    corpus.dialogues.back().utterances.push_back(
        Utterance{keys[r].speaker, emotions[r], std::move(features[r])});
  }
  corpus.validate();
  return corpus;
}

// Reads the files write_corpus() produces for the given modality names.
inline DialogueCorpus read_corpus_dir(const std::filesystem::path& dir,
                                      const std::vector<std::string>& modality_names,
                                      const CorpusSchema& schema) {
  std::vector<ModalityFile> files;
  for (const auto& name : modality_names) files.push_back({name, feature_file(dir, name)});
  return read_feature_csv(files, labels_file(dir), schema);
}

}  // namespace mlsan
