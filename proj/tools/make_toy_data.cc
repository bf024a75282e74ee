// Writes the toy parallel corpora used by the shipped configs: en-hi, en-mr
// and hi-mr cipher pairs, each built from its own sentence sample.

#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mtlab/checkpoint.h"
#include "mtlab/synthetic.h"

int main(int argc, char** argv) {
  CLI::App app{"generate toy parallel corpora"};
  std::string out = "data/toy";
  std::size_t pairs = 400, min_words = 3, max_words = 6;
  std::uint64_t seed = 1;
  app.add_option("--out", out, "output directory");
  app.add_option("--pairs", pairs, "pairs per file");
  app.add_option("--seed", seed, "sentence sampling seed");
  app.add_option("--min-words", min_words);
  app.add_option("--max-words", max_words);
  CLI11_PARSE(app, argc, argv);

  std::filesystem::create_directories(out);
  const std::pair<const char*, const char*> files[] = {{"en", "hi"}, {"en", "mr"}, {"hi", "mr"}};
  std::uint64_t salt = 0;
  for (const auto& [src, tgt] : files) {
    const auto english = mtlab::synthetic_sentences(pairs, mtlab::mix_seed(seed, salt++), min_words, max_words);
    std::string text;
    for (const auto& p : mtlab::synthetic_pairs(src, tgt, english)) text += p.src_text + "\t" + p.tgt_text + "\n";
    const auto path = std::filesystem::path(out) / (std::string(src) + "-" + tgt + ".tsv");
    mtlab::write_file(path, text);
    std::cout << path.string() << ": " << pairs << " pairs\n";
  }
  return 0;
}
