from e2tfa.cmd import main

main()
