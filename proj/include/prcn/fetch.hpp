#pragma once

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <openssl/evp.h>
// <resolv.h> (via httplib) defines _res, which collides with Eigen parameter names.
#ifdef _res
#undef _res
#endif

#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "prcn/error.hpp"
#include "prcn/model.hpp"

namespace prcn {

class ChecksumError : public Error {
 public:
  using Error::Error;
};

inline std::string md5_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_md5(), nullptr)) throw Error("md5: EVP_Digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

struct RemoteFile {
  std::string name;
  std::string md5;
};

// Gzip'd MNIST files and their published MD5 sums.
inline std::vector<RemoteFile> mnist_remote_files() {
  return {{"train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"},
          {"train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"},
          {"t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"},
          {"t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"}};
}

inline std::vector<std::string> mnist_mirrors() {
  return {"https://ossci-datasets.s3.amazonaws.com/mnist/", "http://yann.lecun.com/exdb/mnist/"};
}

namespace detail {
// "https://host[:port]/path/" -> ("https://host[:port]", "/path/")
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("fetch: URL without scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  std::string path = url.substr(slash);
  if (path.back() != '/') path += '/';
  return {url.substr(0, slash), path};
}
}  // namespace detail

struct FetchResult {
  std::vector<std::string> downloaded, already_present;
};

// Downloads each file into out_dir unless a copy with the right checksum is
// already there. Mirrors are tried in order; a checksum mismatch counts as
// a failed mirror. Nothing is written unless its checksum verifies.
inline FetchResult fetch_files(const std::string& out_dir, const std::vector<std::string>& mirrors,
                               const std::vector<RemoteFile>& files, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  FetchResult res;
  for (const auto& f : files) {
    const fs::path dest = fs::path(out_dir) / f.name;
    if (fs::exists(dest) && md5_hex(read_file_bytes(dest.string())) == f.md5) {
      res.already_present.push_back(f.name);
      continue;
    }
    std::string failures;
    bool ok = false;
    for (const auto& mirror : mirrors) {
      const auto [host, prefix] = detail::split_url(mirror);
      httplib::Client cli(host);
      cli.set_follow_location(true);
      cli.set_connection_timeout(10);
      cli.set_read_timeout(60);
      auto r = cli.Get(prefix + f.name);
      if (!r) {
        failures += "\n  " + mirror + f.name + ": " + httplib::to_string(r.error());
        continue;
      }
      if (r->status != 200) {
        failures += "\n  " + mirror + f.name + ": HTTP " + std::to_string(r->status);
        continue;
      }
      const std::span<const std::uint8_t> body(reinterpret_cast<const std::uint8_t*>(r->body.data()), r->body.size());
      const auto sum = md5_hex(body);
      if (sum != f.md5) {
        failures += "\n  " + mirror + f.name + ": md5 " + sum + " != " + f.md5;
        continue;
      }
      const fs::path tmp = dest.string() + ".part";
      std::ofstream(tmp, std::ios::binary).write(r->body.data(), static_cast<std::streamsize>(r->body.size()));
      fs::rename(tmp, dest);
      if (log) *log << "fetched " << f.name << " from " << mirror << "\n";
      res.downloaded.push_back(f.name);
      ok = true;
      break;
    }
    if (!ok) {
      if (failures.find("md5") != std::string::npos) throw ChecksumError("fetch " + f.name + " failed:" + failures);
      throw Error("fetch " + f.name + " failed:" + failures);
    }
  }
  return res;
}

}  // namespace prcn
