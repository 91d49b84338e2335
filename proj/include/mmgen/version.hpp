#pragma once

#define MMGEN_VERSION "0.1.0"

namespace mmgen {

// Bumped when the on-disk layout of the named format changes.
inline constexpr int kManifestFormat = 1;
inline constexpr int kPromptFormat = 1;
inline constexpr int kCheckpointFormat = 1;
inline constexpr int kReportFormat = 1;

}  // namespace mmgen
