// Trains a two-model chain on the modular-sum task and decodes one held-out
// prompt both ways.

#include <iomanip>
#include <iostream>

#include "llmboost/llmboost.hpp"

using namespace llmboost;

int main() {
  auto setup = default_chain_setup(TaskKind::ModSum, 1);
  setup.train.epochs = 15;
  std::cout << "training 2-model chain on modsum (" << setup.task.count << " examples, " << setup.train.epochs
            << " epochs per stage)\n";
  const auto run = run_chain(setup);
  for (const auto& m : run.metrics) {
    if (m.epoch % 5) continue;
    std::cout << "  stage " << m.stage << " epoch " << std::setw(2) << m.epoch << "  ce " << std::fixed
              << std::setprecision(3) << m.ce << "  supp " << m.supp << "\n";
  }
  std::cout << "held-out accuracy  base " << std::setprecision(4) << token_accuracy(run.ensemble, run.test, 1)
            << "  chain " << token_accuracy(run.ensemble, run.test, 2) << "\n";

  const auto& ex = run.test.front();
  std::vector<int> prompt;
  for (std::size_t t = 0; t < ex.input.size() && ex.gold[t] == kNoLabel; ++t) prompt.push_back(ex.input[t]);
  prompt.push_back(ex.input[prompt.size()]);
  const auto seq = decode_sequential(run.ensemble, prompt, 8);
  const auto pip = decode_pipelined(run.ensemble, prompt, 8);
  auto show = [](const std::vector<int>& v) {
    for (int x : v) std::cout << ' ' << x;
    std::cout << '\n';
  };
  std::cout << "prompt:    ";
  show(prompt);
  std::cout << "expected:  ";
  std::vector<int> want;
  for (std::size_t t = prompt.size() - 1; t < ex.gold.size(); ++t) want.push_back(ex.gold[t]);
  show(want);
  std::cout << "sequential:";
  show(seq.tokens);
  std::cout << "pipelined: ";
  show(pip.tokens);
  std::cout << "state passing " << pip.timing.state_passing_us << " us over " << pip.timing.states_passed
            << " states\n\n";

  std::cout << format_table_text(speedup_table({{2, 2}, {2, 2}, {1, 2}, 1.0, 0.0}));
  return 0;
}
