#pragma once

#include <json.hpp>

#include "nn.hpp"

namespace idfuse {

// Checkpoint archive: one file holding a JSON metadata block (config echo,
// RNG state, iteration counter, frozen-component fingerprints) followed by
// named float tensors. Optimizer moments ride along under "opt.m/" and
// "opt.v/" prefixed names so an interrupted run resumes bit-exactly.

using json = nlohmann::json;

void save_checkpoint(const std::string& path, const ParamStore<float>& ps, const AdamW<float>* opt,
                     const json& meta);

// Store must already contain identically named/shaped parameters (built by
// constructing the same topology); only values are overwritten. With
// `partial` the file may cover a subset of the store (used to drop the
// pretrained reference-encoder weights into a full model).
json load_checkpoint(const std::string& path, ParamStore<float>& ps, AdamW<float>* opt, bool partial = false);

// metadata block only
json peek_checkpoint_meta(const std::string& path);

std::string file_sha256(const std::string& path);

// parameter name -> shape table, for the checkpoint format documentation
std::string describe_params(const ParamStore<float>& ps);

}  // namespace idfuse
