#pragma once

#include "ktie/grid.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ktie {

// Columns t, x1, x2, theta, value; one row per node, level-major. Static
// fields write t = 0.
void write_field_csv(std::ostream& os, const Field& f);

// Binary dump of a field, little-endian:
//   bytes 0-7    magic "KTIEFLD1"
//   uint32       levels, n_dir, n_space
//   float64      dx, dt
//   float64[]    levels * n_dir * n_space values in grid index order
//                ((n * n_dir + j) * n_space + i).
void write_field_binary(const std::filesystem::path& path, const Field& f);
// Reads a dump written on a grid with the same shape; throws GridMismatch otherwise.
Field read_field_binary(const std::filesystem::path& path, const GridPtr& grid);

// Output directory that remembers every file written through it.
class ArtifactWriter {
  public:
    explicit ArtifactWriter(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    // Writes root / name (text mode) and records it. Returns the full path.
    std::filesystem::path write(const std::string& name, const std::function<void(std::ostream&)>& body);
    std::filesystem::path write_binary_field(const std::string& name, const Field& f);
    const std::vector<std::string>& files() const { return files_; }

  private:
    void record(const std::string& name);

    std::filesystem::path root_;
    std::vector<std::string> files_;
};

} // namespace ktie
