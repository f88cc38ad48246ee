// Writes the synthetic multi-topic dialogue corpus as JSONL.

#include "cmn/synthetic.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"generate a synthetic template dialogue corpus"};
  cmn::ToyCorpusOptions opt;
  std::string output, held_output, candidates_output, annotations_output;
  int annotators = 3;
  double held_fraction = 0.2;
  app.add_option("--output", output, "JSONL file to write")->required();
  app.add_option("--held-out-output", held_output, "also split off a held-out JSONL file");
  app.add_option("--held-out-fraction", held_fraction, "fraction of pairs held out");
  app.add_option("--candidates-output", candidates_output, "candidate pairs for the held-out (or all) pairs");
  app.add_option("--annotations-output", annotations_output, "simulated ratings of the candidates (CSV)");
  app.add_option("--annotators", annotators, "simulated rater count");
  app.add_option("--conversations", opt.conversations, "conversation count");
  app.add_option("--turns", opt.turns_per_conversation, "turns per conversation");
  app.add_option("--topics", opt.topics_per_conversation, "topics per conversation");
  app.add_option("--variants", opt.variants, "reply variants per topic");
  app.add_option("--words", opt.words_per_variant, "content words per reply");
  app.add_option("--seed", opt.seed, "generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto corpus = cmn::make_toy_corpus(opt);
    std::vector<cmn::DialoguePair> sources = corpus.pairs;
    if (held_output.empty()) {
      cmn::save_dialogues(output, corpus.pairs);
      std::cout << "wrote " << corpus.pairs.size() << " pairs to " << output << '\n';
    } else {
      auto [train, held] = cmn::split_held_out(corpus.pairs, held_fraction, opt.seed + 7);
      cmn::save_dialogues(output, train);
      cmn::save_dialogues(held_output, held);
      std::cout << "wrote " << train.size() << " pairs to " << output << " and " << held.size() << " to "
                << held_output << '\n';
      sources = std::move(held);
    }
    if (!candidates_output.empty() || !annotations_output.empty()) {
      const auto candidates = cmn::make_toy_candidates(corpus, sources, opt.seed + 11);
      std::vector<cmn::DialoguePair> pairs;
      for (const auto& c : candidates) pairs.push_back(c.pair);
      if (!candidates_output.empty()) {
        cmn::save_dialogues(candidates_output, pairs);
        std::cout << "wrote " << pairs.size() << " candidate pairs to " << candidates_output << '\n';
      }
      if (!annotations_output.empty()) {
        std::ofstream out(annotations_output);
        if (!out) throw cmn::Error("cannot write " + annotations_output);
        cmn::write_toy_annotations(out, candidates, annotators, opt.seed + 13);
        std::cout << "wrote ratings from " << annotators << " raters to " << annotations_output << '\n';
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
