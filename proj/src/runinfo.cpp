#include "puda/runinfo.hpp"

#include <Eigen/Core>
#include <fstream>

#include <sys/utsname.h>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"

namespace puda::runinfo {

using nlohmann::json;

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::string environment_stamp() {
  json j;
#if defined(__clang__)
  j["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  j["compiler"] = std::string("gcc ") + __VERSION__;
#else
  j["compiler"] = "unknown";
#endif
  j["cplusplus"] = __cplusplus;
  j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
               "." + std::to_string(EIGEN_MINOR_VERSION);
  j["eigen_simd"] = Eigen::SimdInstructionSetsInUse();
#ifdef NDEBUG
  j["build"] = "release";
#else
  j["build"] = "debug";
#endif
  struct utsname u {};
  if (uname(&u) == 0) {
    j["os"] = std::string(u.sysname) + " " + u.release;
    j["machine"] = u.machine;
  }
  j["float"] = "ieee754-binary64";
  return j.dump(2);
}

std::string to_json(const RunMeta& meta) {
  json j;
  j["command"] = meta.command;
  j["seed"] = meta.seed;
  j["config"] = meta.config.values();
  j["source"] = {{"path", meta.source.string()}, {"hash", meta.source_hash}};
  if (!meta.target.empty()) {
    j["target"] = {{"path", meta.target.string()}, {"hash", meta.target_hash}};
  }
  return j.dump(2);
}

void write_run_files(const std::filesystem::path& dir, const RunMeta& meta) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "config.resolved", std::ios::trunc) << meta.config.dump();
  std::ofstream(dir / "env.json", std::ios::trunc) << environment_stamp() << "\n";
  std::ofstream(dir / "run.meta", std::ios::trunc) << to_json(meta) << "\n";
}

}  // namespace puda::runinfo
