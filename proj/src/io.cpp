#include "ktie/io.hpp"

#include "ktie/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <ostream>

namespace ktie {

namespace {

constexpr char kMagic[8] = {'K', 'T', 'I', 'E', 'F', 'L', 'D', '1'};

static_assert(std::endian::native == std::endian::little, "binary dumps assume a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

} // namespace

void write_field_csv(std::ostream& os, const Field& f) {
    const PhaseGrid& g = f.grid();
    os << "t,x1,x2,theta,value\n";
    os.precision(17);
    for (int n = 0; n < f.levels(); ++n)
        for (int j = 0; j < g.n_dir(); ++j)
            for (int i = 0; i < g.n_space(); ++i) {
                const Vec2& x = g.node(i);
                os << (f.is_timed() ? g.time(n) : 0.0) << ',' << x.x << ',' << x.y << ',' << g.angle(j) << ','
                   << f.at(n, j, i) << '\n';
            }
}

void write_field_binary(const std::filesystem::path& path, const Field& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw InvalidArgument("cannot write " + path.string());
    const PhaseGrid& g = f.grid();
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(f.levels()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(g.n_dir()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(g.n_space()));
    put<double>(os, g.dx());
    put<double>(os, g.dt());
    os.write(reinterpret_cast<const char*>(f.values().data()),
             static_cast<std::streamsize>(f.values().size() * sizeof(double)));
}

Field read_field_binary(const std::filesystem::path& path, const GridPtr& grid) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw InvalidArgument("cannot read " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw InvalidArgument(path.string() + " is not a field dump");
    const auto levels = get<std::uint32_t>(is);
    const auto n_dir = get<std::uint32_t>(is);
    const auto n_space = get<std::uint32_t>(is);
    const double dx = get<double>(is), dt = get<double>(is);
    if (!is || static_cast<int>(n_dir) != grid->n_dir() || static_cast<int>(n_space) != grid->n_space() ||
        dx != grid->dx() || dt != grid->dt() || (levels != 1 && static_cast<int>(levels) != grid->n_levels()))
        throw GridMismatch(path.string() + " was written on a different grid");
    Field f = levels == 1 ? Field::fixed(grid) : Field::timed(grid);
    is.read(reinterpret_cast<char*>(f.values().data()), static_cast<std::streamsize>(f.values().size() * sizeof(double)));
    if (!is)
        throw InvalidArgument(path.string() + " is truncated");
    return f;
}

ArtifactWriter::ArtifactWriter(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
}

void ArtifactWriter::record(const std::string& name) {
    if (std::find(files_.begin(), files_.end(), name) == files_.end())
        files_.push_back(name);
}

std::filesystem::path ArtifactWriter::write(const std::string& name, const std::function<void(std::ostream&)>& body) {
    const auto path = root_ / name;
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os)
        throw InvalidArgument("cannot write " + path.string());
    body(os);
    record(name);
    return path;
}

std::filesystem::path ArtifactWriter::write_binary_field(const std::string& name, const Field& f) {
    const auto path = root_ / name;
    std::filesystem::create_directories(path.parent_path());
    write_field_binary(path, f);
    record(name);
    return path;
}

} // namespace ktie
