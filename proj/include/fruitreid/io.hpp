#pragma once

#include "fruitreid/cloud.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace fruitreid {

struct PlyData {
  ColoredCloud cloud;
  std::optional<SceneAnnotation> annotation;
};

enum class PlyEncoding { Ascii, BinaryLittleEndian };

/// Reads x,y,z and red,green,blue vertex properties (ASCII or binary
/// little-endian). An `instance_id` property (-1 = background) yields an
/// annotation. 8-bit colors are divided by 255; float colors are taken as-is.
PlyData load_ply(const std::filesystem::path& path);

/// Writes float32 positions, uint8 colors and, with an annotation, the
/// instance_id/semantic columns plus a per-instance display color.
void save_ply(const std::filesystem::path& path, const ColoredCloud& cloud,
              const SceneAnnotation* annotation = nullptr,
              PlyEncoding encoding = PlyEncoding::BinaryLittleEndian);

/// Display color used for instance `id` in annotated PLY output.
std::array<std::uint8_t, 3> instance_display_color(int id);

/// Association CSV (`t_id,prev_id`, prev_id -1 for no match). Ids are the
/// instance ids of the given annotations; without annotations ids are
/// instance indices.
void save_association_csv(const std::filesystem::path& path, const TemporalAssociation& assoc,
                          const SceneAnnotation* current = nullptr,
                          const SceneAnnotation* previous = nullptr);

TemporalAssociation load_association_csv(const std::filesystem::path& path,
                                         const SceneAnnotation* current = nullptr,
                                         const SceneAnnotation* previous = nullptr,
                                         std::optional<std::size_t> current_count = std::nullopt);

}  // namespace fruitreid
