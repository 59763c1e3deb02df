#pragma once

// Checkpoint container: header.json describes named float32 tensors laid out
// back to back in params.bin (little-endian), plus free-form metadata.

#include <string>
#include <vector>

#include "json.hpp"
#include "miniclip/nets.hpp"

namespace miniclip {

struct CheckpointData {
    std::vector<ParamArray> arrays;
    nlohmann::json meta;  // step, epoch, hyperparameters
};

void write_checkpoint(const std::string& dir, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& dir);

}  // namespace miniclip
