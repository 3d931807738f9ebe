#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "phds/errors.hpp"
#include "phds/model.hpp"
#include "phds/schedule.hpp"

namespace phds {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

constexpr char kCheckpointMagic[4] = {'P', 'H', 'D', 'S'};
constexpr uint32_t kCheckpointVersion = 1;
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeF64 = 1;

struct CheckpointMeta {
    ModelConfig config;
    int64_t step = 0;
    SparsitySchedule schedule;
    uint64_t rng_seed = 0;
};

inline void to_json(nlohmann::json& j, const CheckpointMeta& m) {
    j = nlohmann::json{{"config", m.config},
                       {"step", m.step},
                       {"schedule", m.schedule},
                       {"rng_seed", m.rng_seed}};
}

inline void from_json(const nlohmann::json& j, CheckpointMeta& m) {
    j.at("config").get_to(m.config);
    j.at("step").get_to(m.step);
    j.at("schedule").get_to(m.schedule);
    j.at("rng_seed").get_to(m.rng_seed);
}

namespace ckpt_detail {

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("checkpoint: truncated while reading " + what);
    return v;
}

inline void put_record_f32(std::ostream& out, const std::string& name, const Shape& shape,
                           const std::vector<float>& data) {
    put<uint32_t>(out, uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put<uint8_t>(out, kDtypeF32);
    put<uint32_t>(out, uint32_t(shape.size()));
    for (int64_t d : shape) put<uint64_t>(out, uint64_t(d));
    if (!data.empty())
        out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 4));
}

inline void put_record_f64(std::ostream& out, const std::string& name, const Shape& shape,
                           const std::vector<double>& data) {
    put<uint32_t>(out, uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put<uint8_t>(out, kDtypeF64);
    put<uint32_t>(out, uint32_t(shape.size()));
    for (int64_t d : shape) put<uint64_t>(out, uint64_t(d));
    if (!data.empty())
        out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * 8));
}

struct RawRecord {
    uint8_t dtype = 0;
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;
};

}  // namespace ckpt_detail

inline void save_checkpoint(MoeModel& model, const CheckpointMeta& meta,
                            const std::string& path) {
    using namespace ckpt_detail;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("checkpoint: cannot open " + tmp + " for writing");
        out.write(kCheckpointMagic, 4);
        put<uint32_t>(out, kCheckpointVersion);
        const std::string meta_doc = nlohmann::json(meta).dump();
        put<uint64_t>(out, uint64_t(meta_doc.size()));
        out.write(meta_doc.data(), std::streamsize(meta_doc.size()));

        for (auto& p : model.parameters())
            put_record_f32(out, p.name, p.tensor.shape(), p.tensor.data());
        for (size_t l = 0; l < model.layers().size(); ++l) {
            for (auto& [k, entry] : model.layers()[l].bank.all()) {
                const std::string base =
                    "layers." + std::to_string(l) + ".bank.k" + std::to_string(k) + ".lb.";
                put_record_f64(out, base + "f_sum", {int64_t(entry.lb.f_sum.size())},
                               entry.lb.f_sum);
                put_record_f64(out, base + "p_sum", {int64_t(entry.lb.p_sum.size())},
                               entry.lb.p_sum);
                put_record_f64(out, base + "batches", {1}, {double(entry.lb.batches)});
            }
        }
        if (!out) throw FormatError("checkpoint: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw FormatError("checkpoint: cannot move " + tmp + " into place");
}

struct LoadedCheckpoint {
    MoeModel model;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);

    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw FormatError("checkpoint: bad magic in " + path);
    const auto version = get<uint32_t>(in, "version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));

    const auto meta_len = get<uint64_t>(in, "metadata length");
    if (meta_len > (uint64_t(1) << 30))
        throw FormatError("checkpoint: implausible metadata length");
    std::string meta_doc(meta_len, '\0');
    in.read(meta_doc.data(), std::streamsize(meta_len));
    if (!in) throw FormatError("checkpoint: truncated metadata");
    nlohmann::json meta_json = nlohmann::json::parse(meta_doc, nullptr, false);
    if (meta_json.is_discarded()) throw FormatError("checkpoint: metadata is not valid JSON");
    CheckpointMeta meta = meta_json.get<CheckpointMeta>();

    std::map<std::string, RawRecord> records;
    while (true) {
        uint32_t name_len;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.eof() && in.gcount() == 0) break;
        if (!in || in.gcount() != sizeof(name_len))
            throw FormatError("checkpoint: truncated record header");
        std::string name(name_len, '\0');
        in.read(name.data(), std::streamsize(name_len));
        if (!in) throw FormatError("checkpoint: truncated record name");
        RawRecord rec;
        rec.dtype = get<uint8_t>(in, "dtype of '" + name + "'");
        if (rec.dtype != kDtypeF32 && rec.dtype != kDtypeF64)
            throw FormatError("checkpoint: unknown dtype in record '" + name + "'");
        const auto rank = get<uint32_t>(in, "rank of '" + name + "'");
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const auto d = get<uint64_t>(in, "dims of '" + name + "'");
            rec.shape.push_back(int64_t(d));
            numel *= int64_t(d);
        }
        if (rec.dtype == kDtypeF32) {
            rec.f32.resize(size_t(numel));
            if (numel > 0)
                in.read(reinterpret_cast<char*>(rec.f32.data()), std::streamsize(numel * 4));
        } else {
            rec.f64.resize(size_t(numel));
            if (numel > 0)
                in.read(reinterpret_cast<char*>(rec.f64.data()), std::streamsize(numel * 8));
        }
        if (!in) throw FormatError("checkpoint: truncated payload of '" + name + "'");
        records.emplace(std::move(name), std::move(rec));
    }

    MoeModel model(meta.config, 0);
    // recreate the bank entries present in the file before filling tensors
    for (const auto& [name, rec] : records) {
        const auto bank_pos = name.find(".bank.k");
        if (bank_pos == std::string::npos) continue;
        if (name.rfind("layers.", 0) != 0 || bank_pos <= 7)
            throw FormatError("checkpoint: malformed bank record name '" + name + "'");
        size_t layer;
        int k;
        try {
            layer = size_t(std::stoll(name.substr(7, bank_pos - 7)));
            const size_t k_start = bank_pos + 7;
            k = int(std::stoll(name.substr(k_start, name.find('.', k_start) - k_start)));
        } catch (const std::exception&) {
            throw FormatError("checkpoint: malformed bank record name '" + name + "'");
        }
        if (layer >= model.layers().size())
            throw FormatError("checkpoint: record '" + name + "' names a missing layer");
        model.layers()[layer].bank.ensure(k);
    }

    size_t consumed = 0;
    for (auto& p : model.parameters()) {
        auto it = records.find(p.name);
        if (it == records.end())
            throw FormatError("checkpoint: missing tensor record '" + p.name + "'");
        if (it->second.dtype != kDtypeF32 || it->second.shape != p.tensor.shape())
            throw FormatError("checkpoint: record '" + p.name + "' has wrong dtype or shape");
        p.tensor.data() = it->second.f32;
        ++consumed;
    }
    for (size_t l = 0; l < model.layers().size(); ++l) {
        for (auto& [k, entry] : model.layers()[l].bank.all()) {
            const std::string base =
                "layers." + std::to_string(l) + ".bank.k" + std::to_string(k) + ".lb.";
            for (const char* field : {"f_sum", "p_sum", "batches"}) {
                auto it = records.find(base + field);
                if (it == records.end())
                    throw FormatError("checkpoint: missing tensor record '" + base + field + "'");
                if (it->second.dtype != kDtypeF64)
                    throw FormatError("checkpoint: record '" + base + field + "' has wrong dtype");
                ++consumed;
                if (std::string(field) == "f_sum") entry.lb.f_sum = it->second.f64;
                else if (std::string(field) == "p_sum") entry.lb.p_sum = it->second.f64;
                else entry.lb.batches = int64_t(it->second.f64.at(0));
            }
        }
    }
    if (consumed != records.size())
        throw FormatError("checkpoint: file contains unexpected extra records");

    return {std::move(model), std::move(meta)};
}

}  // namespace phds
