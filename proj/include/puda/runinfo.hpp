#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "puda/config.hpp"

namespace puda::runinfo {

/// Keeps freed activation buffers inside the process (glibc only). Large
/// tensors are otherwise returned to the kernel on free and page-faulted
/// back in on every step.
void configure_allocator();

/// Compiler, library and host facts for the run directory.
std::string environment_stamp();

struct RunMeta {
  std::string command;
  config::FlatConfig config;
  std::uint64_t seed = 0;
  std::filesystem::path source;
  std::string source_hash;
  std::filesystem::path target;
  std::string target_hash;
};

/// JSON with the full resolved config, seed and dataset content hashes.
std::string to_json(const RunMeta& meta);

/// Writes config.resolved, env.json and run.meta into `dir`.
void write_run_files(const std::filesystem::path& dir, const RunMeta& meta);

}  // namespace puda::runinfo
