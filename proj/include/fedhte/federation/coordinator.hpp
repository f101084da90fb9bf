#pragma once

#include "fedhte/error.hpp"
#include "fedhte/federation/codec.hpp"
#include "fedhte/federation/transport.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"

#include <algorithm>
#include <future>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fedhte::wire {

// Everything the coordinator tells every site, minus the target moments.
struct RoundConfig {
  DesignDescriptor design;
  TiltSpec tilt;
  bool tilt_enabled = true;
  GlmSpec ps;
  GlmSpec or_spec;
  std::uint64_t base_seed = 0;

  std::string hash() const { return config_hash(design, tilt, tilt_enabled, ps, or_spec); }
};

inline MomentRequest build_request(const RoundConfig& cfg, const std::string& site_id,
                                   const Vector& full_moments, const Matrix& moment_matrix) {
  MomentRequest r;
  r.site_id = site_id;
  r.design = cfg.design;
  r.tilt = cfg.tilt;
  r.tilt_enabled = cfg.tilt_enabled;
  r.ps = cfg.ps;
  r.or_spec = cfg.or_spec;
  r.full_moments = full_moments;
  r.moment_matrix = moment_matrix;
  r.base_seed = cfg.base_seed;
  r.config_hash = cfg.hash();
  return r;
}

struct TranscriptEntry {
  std::string site_id;
  std::string request;
  std::string response;  // empty when the site never answered
};

struct Transcript {
  std::vector<TranscriptEntry> entries;

  // FNV-1a over every exchange in site order.
  std::string digest() const {
    std::string all;
    for (const auto& e : entries) {
      all += e.site_id;
      all.push_back('\0');
      all += e.request;
      all.push_back('\0');
      all += e.response;
      all.push_back('\0');
    }
    return hex64(fnv1a64(all));
  }
};

struct Unavailable {
  std::string site_id;
  std::string reason;
};

struct RoundResult {
  std::vector<Augmentation> augmentations;  // ascending site_id
  std::vector<Unavailable> unavailable;
  Transcript transcript;
  int rounds = 0;
};

// One request to, and one reply from, every site. Sites are contacted
// concurrently; results are ordered by site id. Unreachable sites and sites
// that answer with an error message are excluded with a reason. Replies that
// violate the schema abort the round.
inline RoundResult coordinator_round(const std::vector<Channel*>& sites, const RoundConfig& cfg,
                                     const Vector& full_moments, const Matrix& moment_matrix,
                                     Eigen::Index q) {
  std::set<std::string> seen;
  for (const auto* c : sites) {
    if (!seen.insert(c->site_id()).second) {
      throw ConfigError("duplicate site id '" + c->site_id() + "'");
    }
  }
  struct Outcome {
    TranscriptEntry entry;
    std::optional<Augmentation> aug;
    std::optional<Unavailable> failure;
    std::exception_ptr protocol_error;
  };
  const std::string hash = cfg.hash();
  auto run = [&](Channel* c) {
    Outcome o;
    o.entry.site_id = c->site_id();
    o.entry.request = encode(build_request(cfg, c->site_id(), full_moments, moment_matrix));
    try {
      o.entry.response = c->exchange(o.entry.request);
    } catch (const TransportError& e) {
      o.failure = Unavailable{c->site_id(), e.what()};
      return o;
    }
    try {
      Message m = decode(o.entry.response);
      if (auto* err = std::get_if<ErrorMessage>(&m)) {
        o.failure = Unavailable{c->site_id(), "site error (" + err->code + "): " + err->message};
        return o;
      }
      auto* a = std::get_if<Augmentation>(&m);
      if (!a) throw ProtocolError("site '" + c->site_id() + "' sent an unexpected message kind");
      if (a->site_id != c->site_id()) {
        throw ProtocolError("reply from '" + c->site_id() + "' claims site id '" + a->site_id + "'");
      }
      if (a->config_hash != hash) {
        throw ProtocolError("site '" + c->site_id() + "' answered for config hash " + a->config_hash);
      }
      if (a->q != q) {
        throw ProtocolError("site '" + c->site_id() + "' sent q = " + std::to_string(a->q) +
                            ", expected " + std::to_string(q));
      }
      if (static_cast<Eigen::Index>(a->replicates.size()) != moment_matrix.rows()) {
        throw ProtocolError("site '" + c->site_id() + "' sent " + std::to_string(a->replicates.size()) +
                            " replicates, expected " + std::to_string(moment_matrix.rows()));
      }
      o.aug = std::move(*a);
    } catch (const ProtocolError&) {
      o.protocol_error = std::current_exception();
    }
    return o;
  };

  std::vector<std::future<Outcome>> futures;
  futures.reserve(sites.size());
  for (auto* c : sites) futures.push_back(std::async(std::launch::async, run, c));
  std::vector<Outcome> outcomes;
  for (auto& f : futures) outcomes.push_back(f.get());
  std::sort(outcomes.begin(), outcomes.end(),
            [](const Outcome& a, const Outcome& b) { return a.entry.site_id < b.entry.site_id; });

  RoundResult res;
  res.rounds = sites.empty() ? 0 : 1;
  for (auto& o : outcomes) {
    if (o.protocol_error) std::rethrow_exception(o.protocol_error);
    res.transcript.entries.push_back(o.entry);
    if (o.aug) res.augmentations.push_back(std::move(*o.aug));
    if (o.failure) res.unavailable.push_back(*o.failure);
  }
  return res;
}

}  // namespace fedhte::wire
