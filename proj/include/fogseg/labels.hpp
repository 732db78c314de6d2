#pragma once

#include <cstdint>
#include <vector>

#include "fogseg/common.hpp"

namespace fogseg {

// Void/ignored pixels use the Cityscapes convention.
inline constexpr uint8_t kIgnoreLabel = 255;

struct LabelMap {
    int h = 0, w = 0;
    std::vector<uint8_t> v;  // train ids 0..K-1, or 255 for void

    size_t size() const { return v.size(); }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

struct LabelBatch {
    int n = 0, h = 0, w = 0;
    std::vector<uint8_t> v;

    static LabelBatch from(const std::vector<LabelMap>& maps) {
        check(!maps.empty(), "LabelBatch: empty sample list");
        LabelBatch b;
        b.n = static_cast<int>(maps.size());
        b.h = maps[0].h;
        b.w = maps[0].w;
        b.v.reserve(static_cast<size_t>(b.n) * b.h * b.w);
        for (const auto& m : maps) {
            check(m.h == b.h && m.w == b.w, "LabelBatch: sample size mismatch (",
                  m.h, "x", m.w, " vs ", b.h, "x", b.w, ")");
            b.v.insert(b.v.end(), m.v.begin(), m.v.end());
        }
        return b;
    }

    size_t size() const { return v.size(); }
};

}  // namespace fogseg
