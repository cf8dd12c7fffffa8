#include "markhaz/cli.hpp"

int main(int argc, char** argv)
{
  return markhaz::dispatch({argv + 1, argv + argc});
}
