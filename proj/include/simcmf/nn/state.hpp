#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "simcmf/core/archive.hpp"
#include "simcmf/nn/module.hpp"

namespace simcmf::nn {

struct StateLoadReport {
  std::vector<std::string> missing;
  std::vector<std::string> mismatched;  // "name: stored [..] vs expected [..]"
  std::vector<std::string> extra;

  bool complete() const { return missing.empty() && mismatched.empty(); }

  // Throws LoadError naming every missing or mismatched key.
  void require_complete(const std::string& source) const {
    if (complete()) return;
    std::string msg = source + ": incompatible checkpoint";
    if (!missing.empty()) {
      msg += "; missing keys:";
      for (const auto& k : missing) msg += " " + k;
    }
    if (!mismatched.empty()) {
      msg += "; shape mismatches:";
      for (const auto& k : mismatched) msg += " " + k;
    }
    throw LoadError(msg);
  }
};

inline Archive state_archive(const Module& module, const std::string& prefix = "",
                             DType dtype = DType::f64) {
  Archive a;
  for (const auto& t : module.state()) {
    if (t.tensor.is_meta()) throw Error("cannot serialize meta tensor '" + t.name + "'");
    a.add(prefix + t.name, t.tensor, dtype);
  }
  return a;
}

// Copies archive values into the module's parameters and buffers. Nothing is
// written unless every expected key is present with the right shape. Archive
// keys outside `prefix` are ignored; keys inside it that the module does not
// have are reported as extra.
inline StateLoadReport load_state(const Module& module, const Archive& archive,
                                  const std::string& prefix = "") {
  StateLoadReport report;
  const auto state = module.state();
  std::vector<const ArchiveEntry*> matched(state.size(), nullptr);
  std::set<std::string> expected;
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto key = prefix + state[i].name;
    expected.insert(key);
    const auto* e = archive.find(key);
    if (!e) {
      report.missing.push_back(key);
    } else if (e->shape != state[i].tensor.shape()) {
      report.mismatched.push_back(key + ": stored " + shape_str(e->shape) + " vs expected " +
                                  shape_str(state[i].tensor.shape()));
    } else {
      matched[i] = e;
    }
  }
  for (const auto& e : archive.entries)
    if (e.name.rfind(prefix, 0) == 0 && !expected.count(e.name)) report.extra.push_back(e.name);
  if (!report.complete()) return report;
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (matched[i]->values.size() != static_cast<std::size_t>(state[i].tensor.numel()))
      throw LoadError("archive entry '" + matched[i]->name + "' has no decoded values");
    std::copy(matched[i]->values.begin(), matched[i]->values.end(),
              state[i].tensor.mutable_data().begin());
  }
  return report;
}

}  // namespace simcmf::nn
