#include "unifusion/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little, "blob layout assumes little-endian f64");

namespace unifusion {

void save_tensor_file(const std::string& path, const std::map<std::string, Tensor>& entries) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    std::size_t offset = 0;
    for (const auto& [name, t] : entries) {
        header[name] = {{"shape", t.shape}, {"byte_offset", offset}};
        offset += static_cast<std::size_t>(t.numel()) * sizeof(double);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const std::string hs = header.dump();
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.put('\n');
    for (const auto& [name, t] : entries) {
        out.write(reinterpret_cast<const char*>(t.data->data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::map<std::string, Tensor> load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("missing header: " + path);
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt header in " + path + ": " + e.what());
    }
    const std::streampos blob_start = in.tellg();
    in.seekg(0, std::ios::end);
    const std::size_t blob_bytes = static_cast<std::size_t>(in.tellg() - blob_start);

    std::size_t expected = 0;
    for (const auto& [name, meta] : header.items()) {
        std::size_t n = 1;
        for (int e : meta.at("shape").get<std::vector<int>>()) n *= static_cast<std::size_t>(e);
        const std::size_t off = meta.at("byte_offset").get<std::size_t>();
        if (off != expected)
            throw std::runtime_error("header offset mismatch at " + name + " in " + path);
        expected += n * sizeof(double);
    }
    if (blob_bytes != expected) {
        // find the first entry that runs past the end of the file
        for (const auto& [name, meta] : header.items()) {
            std::size_t n = 1;
            for (int e : meta.at("shape").get<std::vector<int>>()) n *= static_cast<std::size_t>(e);
            const std::size_t off = meta.at("byte_offset").get<std::size_t>();
            if (off + n * sizeof(double) > blob_bytes)
                throw std::runtime_error("truncated blob in " + path + ": parameter " + name +
                                         " needs bytes [" + std::to_string(off) + ", " +
                                         std::to_string(off + n * sizeof(double)) + ") but blob has " +
                                         std::to_string(blob_bytes));
        }
        throw std::runtime_error("blob length mismatch in " + path + ": expected " +
                                 std::to_string(expected) + " bytes, found " + std::to_string(blob_bytes));
    }

    std::map<std::string, Tensor> out;
    in.seekg(blob_start);
    for (const auto& [name, meta] : header.items()) {
        const auto shape = meta.at("shape").get<std::vector<int>>();
        Tensor t = Tensor::zeros(shape);
        in.read(reinterpret_cast<char*>(t.data->data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw std::runtime_error("read failed for parameter " + name + " in " + path);
        out[name] = std::move(t);
    }
    return out;
}

} // namespace unifusion
