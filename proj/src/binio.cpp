#include "flowharm/binio.hpp"

#include <fstream>
#include <iterator>

namespace flowharm::binio {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data::DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data::DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw data::DataError("write failed: " + path);
}

}  // namespace flowharm::binio
