#include "d3il/observation.hpp"

#include <algorithm>
#include <cmath>

#include "d3il/error.hpp"

namespace d3il {

PackedFrame quantize(const Frame& frame) {
    PackedFrame out{frame.height, frame.width, std::vector<std::uint8_t>(frame.rgb.size())};
    for (std::size_t i = 0; i < frame.rgb.size(); ++i) {
        // round-to-nearest: |dequantized - original| <= 1/510
        const float v = std::clamp(frame.rgb[i], 0.0f, 1.0f);
        out.rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

Observation stack_frames(const PackedFrame& f0, const PackedFrame& f1, const PackedFrame& f2,
                         const PackedFrame& f3) {
    const PackedFrame* frames[kStackFrames] = {&f0, &f1, &f2, &f3};
    for (const auto* f : frames) {
        require(f->height == f0.height && f->width == f0.width, "stacked frames differ in size");
    }
    Observation o;
    o.height = f0.height;
    o.width = f0.width;
    const std::size_t pixels = static_cast<std::size_t>(o.height) * o.width;
    o.pixels.resize(pixels * kObsChannels);
    for (std::size_t p = 0; p < pixels; ++p) {
        for (int k = 0; k < kStackFrames; ++k) {
            for (int c = 0; c < kColorChannels; ++c) {
                o.pixels[p * kObsChannels + k * kColorChannels + c] = frames[k]->rgb[p * kColorChannels + c];
            }
        }
    }
    return o;
}

}  // namespace d3il
