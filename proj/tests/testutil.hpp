#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include <gtest/gtest.h>

#include "cascade/trace.hpp"

namespace cascade::testutil {

inline std::filesystem::path write_temp_file(const std::string& name, std::string_view content) {
  std::filesystem::path path = std::filesystem::path(::testing::TempDir()) / name;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  return path;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Minimal classification record: prediction + softmax over two classes.
inline TraceRecord class_record(std::string id, int label, int local_prediction,
                                double local_confidence, int remote_prediction = 0,
                                double remote_confidence = 0.9) {
  TraceRecord record;
  record.id = std::move(id);
  record.truth.kind = TargetKind::Class;
  record.truth.label = label;
  auto obs = [](int prediction, double confidence) {
    ModelObservation o;
    o.prediction = Prediction{prediction};
    std::vector<double> softmax(2, 0.0);
    softmax[prediction % 2] = confidence;
    softmax[(prediction + 1) % 2] = 1.0 - confidence;
    o.softmax = softmax;
    return o;
  };
  record.local = obs(local_prediction, local_confidence);
  record.remote = obs(remote_prediction, remote_confidence);
  return record;
}

}  // namespace cascade::testutil
