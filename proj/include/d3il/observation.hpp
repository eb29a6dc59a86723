#pragma once

#include <cstdint>
#include <vector>

namespace d3il {

inline constexpr int kStackFrames = 4;
inline constexpr int kColorChannels = 3;
inline constexpr int kObsChannels = kStackFrames * kColorChannels;

/// One rendered RGB frame, HWC, values in [0, 1].
struct Frame {
    int height = 0;
    int width = 0;
    std::vector<float> rgb;
};

/// Quantized frame, HWC uint8.
struct PackedFrame {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;

    bool operator==(const PackedFrame&) const = default;
};

PackedFrame quantize(const Frame& frame);

/// Four consecutive frames stacked along the channel axis: (H, W, 4*3) uint8, oldest first.
struct Observation {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;
    int episode = -1;
    int step = -1;

    bool same_pixels(const Observation& other) const {
        return height == other.height && width == other.width && pixels == other.pixels;
    }

    /// Dequantized value of (row, col, channel).
    float value(int row, int col, int channel) const {
        return pixels[(static_cast<std::size_t>(row) * width + col) * kObsChannels + channel] / 255.0f;
    }
};

/// Stacks frames[0..3] (oldest first) into one observation.
Observation stack_frames(const PackedFrame& f0, const PackedFrame& f1, const PackedFrame& f2,
                         const PackedFrame& f3);

}  // namespace d3il
