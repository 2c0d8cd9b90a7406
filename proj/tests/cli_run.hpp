#pragma once

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>

// Runs the ddcn binary through the shell and captures stdout.
struct CliResult {
  int code = -1;
  std::string out;
};

inline CliResult run_cli(const std::string& args, bool quiet_stderr = true) {
  std::string cmd = std::string(DDCN_CLI_PATH) + " " + args;
  if (quiet_stderr) cmd += " 2>/dev/null";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Value of "key=" in a line of key=value pairs.
inline double field(const std::string& text, const std::string& key) {
  const auto at = text.rfind(key + "=");
  if (at == std::string::npos) return -1.0;
  return std::stod(text.substr(at + key.size() + 1));
}
