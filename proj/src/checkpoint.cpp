#include "miniclip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

using nlohmann::json;
namespace fs = std::filesystem;

namespace miniclip {

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

void write_checkpoint(const std::string& dir, const CheckpointData& data) {
    fs::create_directories(dir);
    json header = data.meta;
    header["format"] = "miniclip-checkpoint-v1";
    json tensors = json::array();
    int64_t offset = 0;
    for (const auto& a : data.arrays) {
        tensors.push_back({{"name", a.name}, {"shape", a.shape}, {"dtype", "f32"}, {"offset", offset}});
        offset += static_cast<int64_t>(a.data.size()) * 4;
    }
    header["tensors"] = std::move(tensors);

    {
        std::ofstream out(fs::path(dir) / "header.json", std::ios::binary);
        if (!out) throw DataError("cannot write " + dir + "/header.json");
        out << header.dump(2) << '\n';
    }
    {
        std::ofstream out(fs::path(dir) / "params.bin", std::ios::binary);
        if (!out) throw DataError("cannot write " + dir + "/params.bin");
        for (const auto& a : data.arrays)
            out.write(reinterpret_cast<const char*>(a.data.data()),
                      static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    }
}

CheckpointData read_checkpoint(const std::string& dir) {
    std::ifstream hin(fs::path(dir) / "header.json");
    if (!hin) throw DataError("cannot open " + dir + "/header.json");
    json header;
    try {
        hin >> header;
    } catch (const json::exception& e) {
        throw DataError("corrupt checkpoint header in " + dir + ": " + e.what());
    }
    if (header.value("format", "") != "miniclip-checkpoint-v1")
        throw DataError("unrecognized checkpoint format in " + dir);

    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw DataError("cannot open " + dir + "/params.bin");
    std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), {});

    CheckpointData data;
    for (const auto& t : header.at("tensors")) {
        ParamArray a;
        a.name = t.at("name").get<std::string>();
        a.shape = t.at("shape").get<Shape>();
        const int64_t offset = t.at("offset").get<int64_t>();
        const int64_t count = numel(a.shape);
        if (offset < 0 || offset + count * 4 > static_cast<int64_t>(bytes.size()))
            throw DataError("checkpoint tensor " + a.name + " runs past params.bin");
        a.data.resize(count);
        std::memcpy(a.data.data(), bytes.data() + offset, static_cast<size_t>(count) * 4);
        data.arrays.push_back(std::move(a));
    }
    header.erase("tensors");
    header.erase("format");
    data.meta = std::move(header);
    return data;
}

}  // namespace miniclip
